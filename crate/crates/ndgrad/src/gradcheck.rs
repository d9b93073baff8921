//! Central-difference gradient verification for every tape op.
//!
//! [`check_gradients`] compares analytic gradients against a symmetric finite
//! difference with step `1e-5`; an element passes when
//! `|analytic − fd| ≤ max(1e-7, 1e-4 · max(|analytic|, |fd|))`.
//!
//! [`check_all`] runs the standard suite: one check per op plus composite
//! chains that exercise several ops together. The two gradient-routing ops
//! (`stop_gradient`, `straight_through`) intentionally disagree with finite
//! differences — that is their whole purpose — so they are verified
//! *semantically* instead: the suite asserts the gradient goes exactly where
//! the routing rule says and nowhere else.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::Result;

const FD_STEP: f64 = 1e-5;
const ABS_TOL: f64 = 1e-7;
const REL_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences, perturbing every element of every input.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root).data()[0])
    };

    let mut max_rel_err = 0.0f64;
    let mut pass = true;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let fp = eval(&plus)?;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let fm = eval(&minus)?;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[ti][ei];
            let diff = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            if diff > ABS_TOL.max(REL_TOL * scale) {
                pass = false;
            }
            let rel = if diff <= ABS_TOL { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) };
            max_rel_err = max_rel_err.max(rel);
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err, pass })
}

/// splitmix64; self-contained so this crate needs no RNG dependency.
struct SplitMix(u64);

impl SplitMix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1).
    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 * 2.0 - 1.0
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.uniform()).collect();
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }

    /// Like `tensor`, but every element stays at least `gap` away from zero
    /// (for ops with a kink at the origin, where finite differences lie).
    fn tensor_away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                let x = self.uniform();
                if x.abs() > gap {
                    break x;
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }
}

fn run(
    name: &str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> CheckReport {
    match check_gradients(name, &inputs, build) {
        Ok(r) => r,
        Err(e) => CheckReport {
            name: format!("{name} (failed to build: {e})"),
            max_rel_err: f64::INFINITY,
            pass: false,
        },
    }
}

/// Weighted mean `mean(x ⊙ w)` where `w` is the last input id — scalarizes a
/// tensor output while keeping per-element gradients distinguishable.
fn weighted_mean(t: &mut Tape, x: NodeId, w: NodeId) -> Result<NodeId> {
    let p = t.mul(x, w)?;
    t.mean_all(p)
}

/// Run the full op-by-op suite with deterministic inputs.
pub fn check_all() -> Vec<CheckReport> {
    let mut rng = SplitMix(0x5EED_0001);
    let mut out = Vec::new();

    let a = rng.tensor(&[3, 4]);
    let b = rng.tensor(&[3, 4]);
    let w = rng.tensor(&[3, 4]);
    out.push(run("add", vec![a.clone(), b.clone(), w.clone()], |t, ids| {
        let s = t.add(ids[0], ids[1])?;
        weighted_mean(t, s, ids[2])
    }));
    out.push(run("sub", vec![a.clone(), b.clone(), w.clone()], |t, ids| {
        let s = t.sub(ids[0], ids[1])?;
        weighted_mean(t, s, ids[2])
    }));
    out.push(run("mul", vec![a.clone(), b.clone(), w.clone()], |t, ids| {
        let s = t.mul(ids[0], ids[1])?;
        weighted_mean(t, s, ids[2])
    }));
    out.push(run("scalar_ops", vec![a.clone(), w.clone()], |t, ids| {
        let s = t.add_scalar(ids[0], 0.7)?;
        let s = t.mul_scalar(s, -1.3)?;
        weighted_mean(t, s, ids[1])
    }));
    out.push(run(
        "add_rows",
        vec![a.clone(), rng.tensor(&[4]), w.clone()],
        |t, ids| {
            let s = t.add_rows(ids[0], ids[1])?;
            weighted_mean(t, s, ids[2])
        },
    ));
    out.push(run(
        "add_cols",
        vec![a.clone(), rng.tensor(&[3]), w.clone()],
        |t, ids| {
            let s = t.add_cols(ids[0], ids[1])?;
            weighted_mean(t, s, ids[2])
        },
    ));
    out.push(run(
        "matmul",
        vec![rng.tensor(&[3, 4]), rng.tensor(&[4, 2]), rng.tensor(&[3, 2])],
        |t, ids| {
            let p = t.matmul(ids[0], ids[1])?;
            weighted_mean(t, p, ids[2])
        },
    ));
    out.push(run(
        "attention",
        vec![
            rng.tensor(&[3, 2]),
            rng.tensor(&[4, 2]),
            rng.tensor(&[4, 3]),
            rng.tensor(&[3, 3]),
        ],
        |t, ids| {
            let y = t.attention(ids[0], ids[1], ids[2])?;
            weighted_mean(t, y, ids[3])
        },
    ));
    out.push(run(
        "transpose_shared_operand",
        vec![rng.tensor(&[3, 4]), rng.tensor(&[4, 4])],
        |t, ids| {
            // mean((Aᵀ·A) ⊙ w): A appears on both sides, so transpose and
            // accumulation are exercised together.
            let at = t.transpose(ids[0])?;
            let p = t.matmul(at, ids[0])?;
            weighted_mean(t, p, ids[1])
        },
    ));
    out.push(run(
        "conv1d",
        vec![rng.tensor(&[1, 2, 9]), rng.tensor(&[2, 2, 3]), rng.tensor(&[2]), rng.tensor(&[1, 2, 5])],
        |t, ids| {
            let y = t.conv1d(ids[0], ids[1], ids[2], 2, 1)?;
            weighted_mean(t, y, ids[3])
        },
    ));
    out.push(run(
        "relu",
        vec![rng.tensor_away_from_zero(&[3, 4], 0.05), w.clone()],
        |t, ids| {
            let y = t.relu(ids[0])?;
            weighted_mean(t, y, ids[1])
        },
    ));
    out.push(run("gelu", vec![rng.tensor(&[3, 4]), w.clone()], |t, ids| {
        let y = t.gelu(ids[0])?;
        weighted_mean(t, y, ids[1])
    }));
    out.push(run("softplus", vec![rng.tensor(&[3, 4]), w.clone()], |t, ids| {
        let y = t.softplus(ids[0])?;
        weighted_mean(t, y, ids[1])
    }));
    out.push(run(
        "abs",
        vec![rng.tensor_away_from_zero(&[3, 4], 0.05), w.clone()],
        |t, ids| {
            let y = t.abs(ids[0])?;
            weighted_mean(t, y, ids[1])
        },
    ));
    out.push(run(
        "layer_norm",
        vec![rng.tensor(&[3, 5]), rng.tensor(&[5]), rng.tensor(&[5]), rng.tensor(&[3, 5])],
        |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_mean(t, y, ids[3])
        },
    ));
    out.push(run("softmax", vec![rng.tensor(&[3, 5]), rng.tensor(&[3, 5])], |t, ids| {
        let y = t.softmax(ids[0])?;
        weighted_mean(t, y, ids[1])
    }));
    out.push(run("log_softmax", vec![rng.tensor(&[3, 5]), rng.tensor(&[3, 5])], |t, ids| {
        let y = t.log_softmax(ids[0])?;
        weighted_mean(t, y, ids[1])
    }));
    out.push(run("sum_all", vec![a.clone(), b.clone()], |t, ids| {
        let p = t.mul(ids[0], ids[1])?;
        t.sum_all(p)
    }));
    out.push(run("mean_all", vec![a.clone()], |t, ids| t.mean_all(ids[0])));
    out.push(run(
        "gather_rows",
        vec![rng.tensor(&[4, 3]), rng.tensor(&[4, 3])],
        |t, ids| {
            let y = t.gather_rows(ids[0], &[0, 2, 1, 1])?;
            weighted_mean(t, y, ids[1])
        },
    ));
    out.push(run("gather1d", vec![rng.tensor(&[5]), rng.tensor(&[3])], |t, ids| {
        let y = t.gather1d(ids[0], &[0, 3, 3])?;
        weighted_mean(t, y, ids[1])
    }));
    out.push(run("logsumexp", vec![rng.tensor(&[6])], |t, ids| t.logsumexp(ids[0])));
    out.push(run(
        "concat_rows",
        vec![rng.tensor(&[2, 3]), rng.tensor(&[3, 3]), rng.tensor(&[5, 3])],
        |t, ids| {
            let y = t.concat_rows(&[ids[0], ids[1]])?;
            weighted_mean(t, y, ids[2])
        },
    ));
    out.push(run(
        "concat_cols",
        vec![rng.tensor(&[3, 2]), rng.tensor(&[3, 4]), rng.tensor(&[3, 6])],
        |t, ids| {
            let y = t.concat_cols(&[ids[0], ids[1]])?;
            weighted_mean(t, y, ids[2])
        },
    ));
    out.push(run(
        "slice_cols",
        vec![rng.tensor(&[3, 6]), rng.tensor(&[3, 2])],
        |t, ids| {
            let y = t.slice_cols(ids[0], 2, 2)?;
            weighted_mean(t, y, ids[1])
        },
    ));
    out.push(run(
        "reshape",
        vec![rng.tensor(&[2, 6]), rng.tensor(&[4, 3])],
        |t, ids| {
            let y = t.reshape(ids[0], &[4, 3])?;
            weighted_mean(t, y, ids[1])
        },
    ));
    out.push(run("cross_entropy_single", vec![rng.tensor(&[5])], |t, ids| {
        t.cross_entropy(ids[0], &[2])
    }));
    out.push(run("cross_entropy_batched", vec![rng.tensor(&[3, 5])], |t, ids| {
        let ce = t.cross_entropy(ids[0], &[2, 0, 4])?;
        t.mean_all(ce)
    }));
    out.push(run(
        "mlp_block",
        vec![
            rng.tensor(&[2, 4]),
            rng.tensor(&[4, 6]),
            rng.tensor(&[6]),
            rng.tensor(&[6, 3]),
            rng.tensor(&[3]),
            rng.tensor(&[3]),
            rng.tensor(&[3]),
            rng.tensor(&[2, 3]),
        ],
        |t, ids| {
            let h = t.matmul(ids[0], ids[1])?;
            let h = t.add_rows(h, ids[2])?;
            let h = t.gelu(h)?;
            let o = t.matmul(h, ids[3])?;
            let o = t.add_rows(o, ids[4])?;
            let o = t.layer_norm(o, ids[5], ids[6], 1e-5)?;
            t.mean_all(o)
        },
    ));
    out.push(run(
        "attention_head",
        vec![rng.tensor(&[4, 3]), rng.tensor(&[4, 3]), rng.tensor(&[4, 3]), rng.tensor(&[4, 3])],
        |t, ids| {
            let kt = t.transpose(ids[1])?;
            let scores = t.matmul(ids[0], kt)?;
            let scores = t.mul_scalar(scores, 1.0 / 3.0_f64.sqrt())?;
            let att = t.softmax(scores)?;
            let o = t.matmul(att, ids[2])?;
            weighted_mean(t, o, ids[3])
        },
    ));
    out.push(check_stop_gradient(&mut rng));
    out.push(check_straight_through(&mut rng));
    out
}

/// `stop_gradient` is checked against its routing contract, not finite
/// differences: for `mean(sg(x) ⊙ x)` the gradient w.r.t. `x` must be exactly
/// `x/n` (only the live factor contributes).
fn check_stop_gradient(rng: &mut SplitMix) -> CheckReport {
    let x = rng.tensor(&[6]);
    let go = || -> Result<bool> {
        let mut t = Tape::new();
        let xid = t.leaf(x.clone());
        let frozen = t.stop_gradient(xid)?;
        let prod = t.mul(frozen, xid)?;
        let m = t.mean_all(prod)?;
        let grads = t.backward(m)?;
        let g = grads.get(xid).expect("x is reachable");
        let n = x.numel() as f64;
        Ok(g.data()
            .iter()
            .zip(x.data())
            .all(|(gv, xv)| (gv - xv / n).abs() <= 1e-15))
    };
    match go() {
        Ok(pass) => CheckReport { name: "stop_gradient(semantic)".into(), max_rel_err: 0.0, pass },
        Err(e) => CheckReport {
            name: format!("stop_gradient(semantic) (failed to build: {e})"),
            max_rel_err: f64::INFINITY,
            pass: false,
        },
    }
}

/// `straight_through(f, c)` must present `f`'s value, send the whole gradient
/// to `c`, and none to `f`.
fn check_straight_through(rng: &mut SplitMix) -> CheckReport {
    let f = rng.tensor(&[5]);
    let c = rng.tensor(&[5]);
    let w = rng.tensor(&[5]);
    let go = || -> Result<bool> {
        let mut t = Tape::new();
        let fid = t.leaf(f.clone());
        let cid = t.leaf(c.clone());
        let wid = t.leaf(w.clone());
        let st = t.straight_through(fid, cid)?;
        let value_ok = t.value(st).data() == f.data();
        let prod = t.mul(st, wid)?;
        let m = t.mean_all(prod)?;
        let grads = t.backward(m)?;
        let n = f.numel() as f64;
        let c_ok = grads
            .get(cid)
            .is_some_and(|g| g.data().iter().zip(w.data()).all(|(gv, wv)| (gv - wv / n).abs() <= 1e-15));
        let f_ok = grads.get(fid).is_none();
        Ok(value_ok && c_ok && f_ok)
    };
    match go() {
        Ok(pass) => CheckReport { name: "straight_through(semantic)".into(), max_rel_err: 0.0, pass },
        Err(e) => CheckReport {
            name: format!("straight_through(semantic) (failed to build: {e})"),
            max_rel_err: f64::INFINITY,
            pass: false,
        },
    }
}
