use bsvie_core::io::{read_table, write_adapted, write_bitemporal, write_table, CsvMeta};
use bsvie_core::{make_grid, AdaptedField, BiTemporalField};

#[test]
fn bitemporal_round_trip() {
    let g = make_grid(0.0, 1.0, 3).unwrap();
    let f = BiTemporalField::from_fn(&g, 2, 2, |t, p, s, o| {
        o[0] = t as f64 + 0.1 * s as f64 - p as f64;
        o[1] = 1.0 / 3.0;
    })
    .unwrap();
    let meta = CsvMeta::new("y").with_grid(&g).with_seed(7);
    let mut buf = Vec::new();
    write_bitemporal(&mut buf, &meta, &f, false).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("schema=1\n# grid s_lo=0 s_hi=1 n_steps=3\n# seed=7\n# name=y\n"));
    let tab = read_table(buf.as_slice()).unwrap();
    assert_eq!(
        tab.columns,
        ["t_index", "s_index", "path", "component", "value"]
    );
    assert_eq!(tab.rows.len(), 4 * 2 * 4 * 2);
    for r in &tab.rows {
        let (t, s, p, k) = (r[0] as usize, r[1] as usize, r[2] as usize, r[3] as usize);
        assert_eq!(r[4], f.get(t, p, s, k));
    }

    let mut upper = Vec::new();
    write_bitemporal(&mut upper, &meta, &f, true).unwrap();
    let tab = read_table(upper.as_slice()).unwrap();
    assert_eq!(tab.rows.len(), 10 * 2 * 2);
    assert!(tab.rows.iter().all(|r| r[1] >= r[0]));
}

#[test]
fn adapted_and_table_round_trip() {
    let g = make_grid(0.0, 2.0, 4).unwrap();
    let f = AdaptedField::from_fn(&g, 3, 1, |p, j, o| o[0] = (p * 10 + j) as f64 * 1e-17);
    let mut buf = Vec::new();
    write_adapted(&mut buf, &CsvMeta::new("eta").with_grid(&g), &f).unwrap();
    let tab = read_table(buf.as_slice()).unwrap();
    assert_eq!(tab.rows.len(), 15);
    for r in &tab.rows {
        assert_eq!(r[3], f.get(r[1] as usize, r[0] as usize, 0));
    }

    let mut buf = Vec::new();
    let rows = vec![vec![0.04, 10.0], vec![0.01, 20.0]];
    write_table(
        &mut buf,
        &CsvMeta::new("rates"),
        &["eps", "avg"],
        rows.clone(),
    )
    .unwrap();
    assert_eq!(read_table(buf.as_slice()).unwrap().rows, rows);
    let mut bad = Vec::new();
    assert!(write_table(&mut bad, &CsvMeta::new("x"), &["a"], vec![vec![1.0, 2.0]]).is_err());
}

#[test]
fn equal_fields_give_equal_bytes_and_other_schemas_are_rejected() {
    let g = make_grid(0.0, 1.0, 2).unwrap();
    let f = AdaptedField::from_fn(&g, 2, 1, |p, j, o| o[0] = (p + j) as f64 / 7.0);
    let write = || {
        let mut b = Vec::new();
        write_adapted(&mut b, &CsvMeta::new("x"), &f).unwrap();
        b
    };
    assert_eq!(write(), write());
    assert!(read_table("schema=2\n# name=x\na\n1\n".as_bytes()).is_err());
}
