//! Central finite-difference gradient oracle.
//!
//! Each differentiable tape op is paired with a naive `f64` reference of its
//! forward pass written here, independently of the library kernels. The
//! oracle differentiates `Σ wᵢ·yᵢ` numerically (step 1e-3) and compares with
//! the tape gradient for the same random output weights `w`.

use dynadepth::tensor::kernels::AttnShape;
use dynadepth::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-4;

type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;
type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Vec<f32>)>,
    /// Which inputs are differentiated.
    pub wrt: Vec<usize>,
    pub build: Builder,
    pub reference: Reference,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Relative error ‖ad − fd‖₂ / max(‖fd‖₂, 1e-6) for one case.
pub fn check(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, data))| {
            let t = Tensor::new(shape.clone(), data.clone()).unwrap();
            if case.wrt.contains(&i) {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let out = (case.build)(&mut tape, &vars);
    let n_out = tape.value(out).numel();
    let w: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seed_grad: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let grads = tape.backward_with_seed(out, &seed_grad);

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|(_, d)| d.iter().map(|&v| v as f64).collect())
        .collect();
    let objective = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs)
            .iter()
            .zip(&w)
            .map(|(y, wi)| y * wi)
            .sum()
    };
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    for &i in &case.wrt {
        let ad = grads.get_or_zeros(vars[i], base[i].len());
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += FD_STEP;
            let mut minus = base.clone();
            minus[i][j] -= FD_STEP;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
            diff2 += (ad[j] as f64 - fd).powi(2);
            ref2 += fd * fd;
        }
    }
    diff2.sqrt() / ref2.sqrt().max(1e-6)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for kk in 0..k {
                out[i * n + j] += a[i * k + kk] * b[kk * n + j];
            }
        }
    }
    out
}

fn ref_rope(x: &[f64], rows: usize, heads: usize, hd: usize, pos0: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    let width = heads * hd;
    let half = hd / 2;
    for r in 0..rows {
        for h in 0..heads {
            for i in 0..half {
                let theta = (pos0 + r) as f64 * 10000f64.powf(-2.0 * i as f64 / hd as f64);
                let a = x[r * width + h * hd + i];
                let b = x[r * width + h * hd + i + half];
                out[r * width + h * hd + i] = a * theta.cos() - b * theta.sin();
                out[r * width + h * hd + i + half] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

fn ref_attention(q: &[f64], k: &[f64], v: &[f64], s: usize, shape: AttnShape) -> Vec<f64> {
    let hd = shape.head_dim;
    let qw = shape.heads * hd;
    let kw = shape.kv_heads * hd;
    let group = shape.heads / shape.kv_heads;
    let mut out = vec![0.0; s * qw];
    for i in 0..s {
        for h in 0..shape.heads {
            let g = h / group;
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..hd)
                        .map(|c| q[i * qw + h * hd + c] * k[j * kw + g * hd + c])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for c in 0..hd {
                    out[i * qw + h * hd + c] += e[j] / z * v[j * kw + g * hd + c];
                }
            }
        }
    }
    out
}

/// One randomly drawn instance of every differentiable op.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..8), r.gen_range(1..5));
    out.push(Case {
        name: "matmul",
        inputs: vec![
            (vec![m, k], rand_vec(r, m * k, -2.0, 2.0)),
            (vec![k, n], rand_vec(r, k * n, -2.0, 2.0)),
        ],
        wrt: vec![0, 1],
        build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        reference: Box::new(move |x| ref_matmul(&x[0], &x[1], m, k, n)),
    });

    let len = r.gen_range(1..10);
    let pair = |r: &mut ChaCha8Rng| {
        vec![
            (vec![len], rand_vec(r, len, -2.0, 2.0)),
            (vec![len], rand_vec(r, len, -2.0, 2.0)),
        ]
    };
    out.push(Case {
        name: "add",
        inputs: pair(r),
        wrt: vec![0, 1],
        build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    });
    out.push(Case {
        name: "sub",
        inputs: pair(r),
        wrt: vec![0, 1],
        build: Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
    });
    out.push(Case {
        name: "mul",
        inputs: pair(r),
        wrt: vec![0, 1],
        build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    });
    out.push(Case {
        name: "mul_scalar_broadcast",
        inputs: vec![
            (vec![len], rand_vec(r, len, -2.0, 2.0)),
            (vec![1], rand_vec(r, 1, -2.0, 2.0)),
        ],
        wrt: vec![0, 1],
        build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|a| a * x[1][0]).collect()),
    });

    let unary = |r: &mut ChaCha8Rng, lo: f32, hi: f32| vec![(vec![len], rand_vec(r, len, lo, hi))];
    out.push(Case {
        name: "sigmoid",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(|t, v| t.sigmoid(v[0])),
        reference: Box::new(|x| x[0].iter().map(|&a| sig(a)).collect()),
    });
    out.push(Case {
        name: "log",
        inputs: unary(r, 0.25, 2.0),
        wrt: vec![0],
        build: Box::new(|t, v| t.log(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|a| a.ln()).collect()),
    });
    out.push(Case {
        name: "exp",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(|t, v| t.exp(v[0])),
        reference: Box::new(|x| x[0].iter().map(|a| a.exp()).collect()),
    });
    // keep samples clear of the clip kinks at 0 and 1
    let clip_in: Vec<f32> = rand_vec(r, len, -2.0, 2.0)
        .into_iter()
        .map(|v| {
            if v.abs() < 0.05 || (v - 1.0).abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect();
    out.push(Case {
        name: "clip01",
        inputs: vec![(vec![len], clip_in)],
        wrt: vec![0],
        build: Box::new(|t, v| t.clip01(v[0])),
        reference: Box::new(|x| x[0].iter().map(|a| a.clamp(0.0, 1.0)).collect()),
    });
    let (sc, sh) = (r.gen_range(-2.0f32..2.0), r.gen_range(-2.0f32..2.0));
    out.push(Case {
        name: "affine",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(move |t, v| t.affine(v[0], sc, sh)),
        reference: Box::new(move |x| x[0].iter().map(|a| sc as f64 * a + sh as f64).collect()),
    });
    out.push(Case {
        name: "silu",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(|t, v| t.silu(v[0])),
        reference: Box::new(|x| x[0].iter().map(|&a| a * sig(a)).collect()),
    });
    out.push(Case {
        name: "sum",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(|t, v| t.sum(v[0])),
        reference: Box::new(|x| vec![x[0].iter().sum()]),
    });
    out.push(Case {
        name: "mean",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(|t, v| t.mean(v[0])),
        reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
    });
    let idx = r.gen_range(0..len);
    out.push(Case {
        name: "index",
        inputs: unary(r, -2.0, 2.0),
        wrt: vec![0],
        build: Box::new(move |t, v| t.index(v[0], idx).unwrap()),
        reference: Box::new(move |x| vec![x[0][idx]]),
    });

    let (rows, cols) = (r.gen_range(2..5), r.gen_range(2..10));
    let (lo, hi) = (r.gen_range(0..rows - 1), rows);
    out.push(Case {
        name: "slice_rows",
        inputs: vec![(vec![rows, cols], rand_vec(r, rows * cols, -2.0, 2.0))],
        wrt: vec![0],
        build: Box::new(move |t, v| t.slice_rows(v[0], lo, hi).unwrap()),
        reference: Box::new(move |x| x[0][lo * cols..hi * cols].to_vec()),
    });
    out.push(Case {
        name: "softmax",
        inputs: vec![(vec![rows, cols], rand_vec(r, rows * cols, -2.0, 2.0))],
        wrt: vec![0],
        build: Box::new(|t, v| t.softmax_lastdim(v[0])),
        reference: Box::new(move |x| {
            let mut out = Vec::new();
            for row in x[0].chunks(cols) {
                let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                let z: f64 = e.iter().sum();
                out.extend(e.iter().map(|v| v / z));
            }
            out
        }),
    });
    out.push(Case {
        name: "rmsnorm",
        inputs: vec![
            (vec![rows, cols], rand_vec(r, rows * cols, -2.0, 2.0)),
            (vec![cols], rand_vec(r, cols, -2.0, 2.0)),
        ],
        wrt: vec![0, 1],
        build: Box::new(|t, v| t.rmsnorm(v[0], v[1], 1e-5).unwrap()),
        reference: Box::new(move |x| {
            let mut out = Vec::new();
            for row in x[0].chunks(cols) {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                let inv = 1.0 / (ms + 1e-5f32 as f64).sqrt();
                out.extend(row.iter().zip(&x[1]).map(|(v, w)| v * inv * w));
            }
            out
        }),
    });
    // 4×10 logits as in the cross-entropy example
    let targets: Vec<u32> = (0..4).map(|_| r.gen_range(0..10)).collect();
    let t2 = targets.clone();
    out.push(Case {
        name: "cross_entropy",
        inputs: vec![(vec![4, 10], rand_vec(r, 40, -2.0, 2.0))],
        wrt: vec![0],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &t2).unwrap()),
        reference: Box::new(move |x| {
            let mut total = 0.0;
            for (row, &tg) in x[0].chunks(10).zip(&targets) {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total += z.ln() - row[tg as usize];
            }
            vec![total / 4.0]
        }),
    });
    let vocab = r.gen_range(2..7);
    let d = r.gen_range(1..5);
    let ids: Vec<u32> = (0..r.gen_range(1..6))
        .map(|_| r.gen_range(0..vocab as u32))
        .collect();
    let ids2 = ids.clone();
    out.push(Case {
        name: "embedding",
        inputs: vec![(vec![vocab, d], rand_vec(r, vocab * d, -2.0, 2.0))],
        wrt: vec![0],
        build: Box::new(move |t, v| t.embedding(v[0], &ids2).unwrap()),
        reference: Box::new(move |x| {
            ids.iter()
                .flat_map(|&i| x[0][i as usize * d..(i as usize + 1) * d].to_vec())
                .collect()
        }),
    });
    let (heads, hd, s) = (r.gen_range(1..3), 2 * r.gen_range(1..4), r.gen_range(1..5));
    let pos0 = r.gen_range(0..20);
    out.push(Case {
        name: "rope",
        inputs: vec![(vec![s, heads * hd], rand_vec(r, s * heads * hd, -2.0, 2.0))],
        wrt: vec![0],
        build: Box::new(move |t, v| t.rope(v[0], heads, hd, pos0).unwrap()),
        reference: Box::new(move |x| ref_rope(&x[0], s, heads, hd, pos0)),
    });
    let kv_heads = r.gen_range(1..3);
    let shape = AttnShape {
        heads: kv_heads * r.gen_range(1..3),
        kv_heads,
        head_dim: r.gen_range(1..5),
    };
    let s = r.gen_range(1..6);
    out.push(Case {
        name: "causal_attention",
        inputs: vec![
            (
                vec![s, shape.q_width()],
                rand_vec(r, s * shape.q_width(), -2.0, 2.0),
            ),
            (
                vec![s, shape.kv_width()],
                rand_vec(r, s * shape.kv_width(), -2.0, 2.0),
            ),
            (
                vec![s, shape.kv_width()],
                rand_vec(r, s * shape.kv_width(), -2.0, 2.0),
            ),
        ],
        wrt: vec![0, 1, 2],
        build: Box::new(move |t, v| t.causal_attention(v[0], v[1], v[2], shape).unwrap()),
        reference: Box::new(move |x| ref_attention(&x[0], &x[1], &x[2], s, shape)),
    });
    out
}

/// Worst relative error per op over `instances` random draws.
pub fn run_suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for inst in 0..instances {
        for case in cases(1000 + inst) {
            let err = check(&case, inst);
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    worst
}
