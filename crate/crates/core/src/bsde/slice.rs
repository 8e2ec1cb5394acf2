//! Backward θ-scheme for one BSDE on both path sets.

use nalgebra::DVector;

use super::regression::{RegressionPlan, Scheme};
use super::SchemeParams;
use crate::error::{Error, Result};
use crate::fields::Paired;
use crate::grid::{PathEnsemble, PathRole, PathSet};

/// A BSDE as seen by the backward scheme.
pub(crate) trait SliceProblem: Sync {
    fn m(&self) -> usize;

    fn terminal(&self, role: PathRole, path: usize, paths: &PathSet, out: &mut [f64]);

    #[allow(clippy::too_many_arguments)]
    fn generator(
        &self,
        role: PathRole,
        s_idx: usize,
        path: usize,
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    );
}

/// Solution of one slice, laid out `[path][node][component]`.
pub(crate) struct SliceOut {
    pub y: Paired<Vec<f64>>,
    pub z: Paired<Vec<f64>>,
}

/// Per-set working storage, node-major.
struct Work {
    y: Vec<f64>,
    z: Vec<f64>,
    g_next: Vec<f64>,
    a: Vec<f64>,
    chat: Vec<f64>,
}

impl Work {
    fn new(nn: usize, m_paths: usize, m: usize, d: usize) -> Self {
        Self {
            y: vec![0.0; nn * m_paths * m],
            z: vec![0.0; nn * m_paths * m * d],
            g_next: vec![0.0; m_paths * m],
            a: vec![0.0; m_paths * m],
            chat: vec![0.0; m_paths * m],
        }
    }
}

fn to_path_major(src: &[f64], nn: usize, m_paths: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..nn {
        for p in 0..m_paths {
            let from = (i * m_paths + p) * w;
            let to = (p * nn + i) * w;
            out[to..to + w].copy_from_slice(&src[from..from + w]);
        }
    }
    out
}

pub(crate) fn solve_slice(
    prob: &dyn SliceProblem,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    scheme: &SchemeParams,
) -> Result<SliceOut> {
    let grid = ens.grid();
    let n = grid.n_steps();
    let nn = n + 1;
    let dt = grid.dt();
    let mp = ens.n_paths();
    let m = prob.m();
    let d = ens.dim();
    let md = m * d;
    let sets = [ens.primary(), ens.regression()];
    let mut work = [Work::new(nn, mp, m, d), Work::new(nn, mp, m, d)];

    for (r, role) in PathRole::BOTH.into_iter().enumerate() {
        let w = &mut work[r];
        for p in 0..mp {
            let o = (n * mp + p) * m;
            prob.terminal(role, p, sets[r], &mut w.y[o..o + m]);
        }
        check_finite(&w.y[n * mp * m..], m, "terminal", n)?;
    }

    let mut target = vec![0.0; mp];
    let mut gbuf = vec![0.0; m];
    let mut ycur = vec![0.0; m];
    for i in (0..n).rev() {
        let theta = if i == n - 1 { 1.0 } else { scheme.theta };

        for w in work.iter_mut() {
            let next = &w.y[(i + 1) * mp * m..(i + 2) * mp * m];
            for (j, a) in w.a.iter_mut().enumerate() {
                *a = next[j] + (1.0 - theta) * dt * w.g_next[j];
            }
        }

        match &plan.scheme {
            Scheme::Later { fits, steps } => {
                let (fit, step) = (&fits[i], &steps[i]);
                for c in 0..m {
                    for p in 0..mp {
                        target[p] = work[1].a[p * m + c];
                    }
                    let coef = fit.coef(&target);
                    for (r, role) in PathRole::BOTH.into_iter().enumerate() {
                        let w = &mut work[r];
                        for p in 0..mp {
                            w.chat[p * m + c] = step.mean(role, p, &coef);
                            for k in 0..d {
                                w.z[(i * mp + p) * md + c * d + k] =
                                    step.cross(role, p, k, &coef) / dt;
                            }
                        }
                    }
                }
            }
            Scheme::Now(fits) => {
                let fit = &fits[i];
                for c in 0..m {
                    for p in 0..mp {
                        target[p] = work[1].a[p * m + c];
                    }
                    let coef = fit.coef(&target);
                    for (r, role) in PathRole::BOTH.into_iter().enumerate() {
                        for p in 0..mp {
                            work[r].chat[p * m + c] = fit.eval(role, p, &coef);
                        }
                    }
                }
                // martingale integrand, centred on the fitted mean
                for c in 0..m {
                    for k in 0..d {
                        for p in 0..mp {
                            let dw = sets[1].increment(p, i, k);
                            target[p] = (work[1].a[p * m + c] - work[1].chat[p * m + c]) * dw;
                        }
                        let coef: DVector<f64> = fit.coef(&target) / dt;
                        for (r, role) in PathRole::BOTH.into_iter().enumerate() {
                            for p in 0..mp {
                                work[r].z[(i * mp + p) * md + c * d + k] = fit.eval(role, p, &coef);
                            }
                        }
                    }
                }
            }
        }

        for (r, role) in PathRole::BOTH.into_iter().enumerate() {
            let w = &mut work[r];
            for p in 0..mp {
                let zo = (i * mp + p) * md;
                let z = &w.z[zo..zo + md];
                let chat = &w.chat[p * m..(p + 1) * m];
                ycur.copy_from_slice(chat);
                for _ in 0..=scheme.inner_corrections {
                    prob.generator(role, i, p, &ycur, z, sets[r], &mut gbuf);
                    for c in 0..m {
                        ycur[c] = chat[c] + theta * dt * gbuf[c];
                    }
                }
                let yo = (i * mp + p) * m;
                w.y[yo..yo + m].copy_from_slice(&ycur);
                if scheme.theta < 1.0 {
                    prob.generator(role, i, p, &ycur, z, sets[r], &mut gbuf);
                    w.g_next[p * m..(p + 1) * m].copy_from_slice(&gbuf);
                }
            }
            check_finite(&w.y[i * mp * m..(i + 1) * mp * m], m, "bsde y", i)?;
            check_finite(&w.z[i * mp * md..(i + 1) * mp * md], md, "bsde z", i)?;
        }
    }

    // the integrand has no increment after the last node; repeat the previous one
    for w in work.iter_mut() {
        let (head, tail) = w.z.split_at_mut(n * mp * md);
        tail.copy_from_slice(&head[(n - 1) * mp * md..]);
    }

    let [wp, wr] = work;
    Ok(SliceOut {
        y: Paired::new(
            to_path_major(&wp.y, nn, mp, m),
            to_path_major(&wr.y, nn, mp, m),
        ),
        z: Paired::new(
            to_path_major(&wp.z, nn, mp, md),
            to_path_major(&wr.z, nn, mp, md),
        ),
    })
}

fn check_finite(vals: &[f64], w: usize, stage: &'static str, node: usize) -> Result<()> {
    if let Some(pos) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage,
            t_node: None,
            s_node: node,
            path: pos / w.max(1),
        });
    }
    Ok(())
}
