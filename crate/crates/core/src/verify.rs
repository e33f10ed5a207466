//! Self-verification suites: finite-difference gradient checks for every
//! differentiable operation and model block, and the Hungarian-versus-
//! exhaustive matching comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionVariant, CrossAttention, CrossInputs, MemoryFeatures, SelfAttention};
use crate::config::TrainConfig;
use crate::decoder::{CsqVariant, Decoder, DecoderConfig, FirstLayerRule, ProjectionForm, ReferenceMode};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::{set_loss, ClassLoss, GroundTruthSet, LossWeights};
use crate::matching::{brute_force_match, hungarian_match};
use crate::model::Detector;
use crate::nn::{Bound, Init, ParamGroup, ParamStore, LAYER_NORM_EPS};
use crate::positional::{embed_points, grid_embeddings, DEFAULT_TEMPERATURE};
use crate::scene::generate_scene;
use crate::tensor::{finite_diff_check_at, finite_diff_check_kinked_at, GradCheck, Graph, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for smooth operations.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;
/// Tolerance for anything containing kinks (relu, abs, min/max, clamp) or
/// matching.
pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: [&str; 7] = ["tensor", "positional", "attention", "encoder", "decoder", "loss", "pipeline"];

/// Largest share of probed coordinates that may sit within one step of a
/// kink before a check counts as failed.
pub const MAX_REFINED_FRACTION: f64 = 0.01;

/// Worst relative error of one named check over all its cases.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    /// Coordinates judged at a smaller step because a kink lay inside the
    /// probe at [`STEP`].
    pub refined: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.refined as f64 <= MAX_REFINED_FRACTION * self.coordinates as f64
    }
}

/// Accumulated result of one or more gradient probes.
#[derive(Clone, Copy, Debug, Default)]
struct Probe {
    err: f64,
    coordinates: usize,
    refined: usize,
}

impl Probe {
    fn join(self, o: Probe) -> Probe {
        Probe {
            err: self.err.max(o.err),
            coordinates: self.coordinates + o.coordinates,
            refined: self.refined + o.refined,
        }
    }
}

impl From<GradCheck> for Probe {
    fn from(r: GradCheck) -> Self {
        Probe {
            err: r.max_rel_error,
            coordinates: r.checked,
            refined: r.refined,
        }
    }
}

/// Seed counts per suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSize {
    pub primitive_seeds: u64,
    pub block_seeds: u64,
    pub pipeline_seeds: u64,
}

impl Default for SuiteSize {
    fn default() -> Self {
        Self {
            primitive_seeds: 100,
            block_seeds: 20,
            pipeline_seeds: 20,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values with `|x| ≥ 0.2`, away from kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.2, 1.5);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `sum(w ⊙ y)` with a fixed random `w`, so every output coordinate matters.
fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

type CaseFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One primitive case: input and scalar function of it.
struct Case {
    x: Tensor,
    f: CaseFn,
}

/// Output shape of `f` at `x`, needed to draw matching weights.
fn out_shape(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = f(&mut g, v)?;
    Ok(g.shape(y).to_vec())
}

fn case(x: Tensor, rng: &mut ChaCha8Rng, op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Result<Case> {
    let shape = out_shape(&op, &x)?;
    let w = weights_for(rng, &shape);
    Ok(Case {
        x,
        f: Box::new(move |g, v| {
            let y = op(g, v)?;
            weighted(g, y, &w)
        }),
    })
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5))
}

fn primitives() -> Vec<(&'static str, bool, Builder)> {
    vec![
        ("matmul_left", true, |rng| {
            let (r, k) = dims(rng);
            let c = rng.gen_range(1..=4);
            let b = uniform(rng, &[k, c], -1.0, 1.0);
            case(uniform(rng, &[r, k], -1.0, 1.0), rng, move |g, x| {
                let bv = g.constant(b.clone());
                g.matmul(x, bv)
            })
        }),
        ("matmul_right", true, |rng| {
            let (k, c) = dims(rng);
            let r = rng.gen_range(1..=4);
            let a = uniform(rng, &[r, k], -1.0, 1.0);
            case(uniform(rng, &[k, c], -1.0, 1.0), rng, move |g, x| {
                let av = g.constant(a.clone());
                g.matmul(av, x)
            })
        }),
        ("add", true, |rng| {
            let (r, c) = dims(rng);
            let k = uniform(rng, &[r, c], -1.0, 1.0);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, move |g, x| {
                let kv = g.constant(k.clone());
                g.add(x, kv)
            })
        }),
        ("sub", true, |rng| {
            let (r, c) = dims(rng);
            let k = uniform(rng, &[r, c], -1.0, 1.0);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, move |g, x| {
                let kv = g.constant(k.clone());
                g.sub(kv, x)
            })
        }),
        ("mul", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, |g, x| g.mul(x, x))
        }),
        ("mul_scalar", true, |rng| {
            let (r, c) = dims(rng);
            let k = uniform(rng, &[r, c + 1], -1.0, 1.0);
            case(uniform(rng, &[1], -1.0, 1.0), rng, move |g, s| {
                let kv = g.constant(k.clone());
                g.mul(s, kv)
            })
        }),
        ("div", true, |rng| {
            let (r, c) = dims(rng);
            let k = uniform(rng, &[r, c], -1.0, 1.0);
            case(off_zero(rng, &[r, c]), rng, move |g, x| {
                let kv = g.constant(k.clone());
                let a = g.div(kv, x)?;
                let b = g.div(x, kv)?;
                g.add(a, b)
            })
        }),
        ("scale_and_shift", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, |g, x| {
                let a = g.scale(x, -1.7)?;
                let b = g.add_scalar(a, 0.3)?;
                g.rsub_scalar(2.0, b)
            })
        }),
        ("sigmoid", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -4.0, 4.0), rng, |g, x| g.sigmoid(x))
        }),
        ("relu", false, |rng| {
            let (r, c) = dims(rng);
            case(off_zero(rng, &[r, c]), rng, |g, x| g.relu(x))
        }),
        ("ln", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], 0.3, 3.0), rng, |g, x| g.ln(x))
        }),
        ("exp", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -2.0, 2.0), rng, |g, x| g.exp(x))
        }),
        ("abs", false, |rng| {
            let (r, c) = dims(rng);
            case(off_zero(rng, &[r, c]), rng, |g, x| g.abs(x))
        }),
        ("powf", true, |rng| {
            let (r, c) = dims(rng);
            let e = rng.gen_range(0.5..3.0);
            case(uniform(rng, &[r, c], 0.2, 2.0), rng, move |g, x| g.powf(x, e))
        }),
        ("clamp", false, |rng| {
            let (r, c) = dims(rng);
            // Inputs avoid the bounds at ±0.1.
            let mut x = off_zero(rng, &[r, c]);
            x.data_mut().iter_mut().for_each(|v| *v *= if v.abs() < 0.3 { 0.25 } else { 1.0 });
            case(x, rng, |g, x| g.clamp(x, -0.1, 0.1))
        }),
        ("maximum_minimum", false, |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            let off = off_zero(rng, &[r, c]);
            let k = Tensor::new(vec![r, c], x.data().iter().zip(off.data()).map(|(a, b)| a + b).collect())?;
            case(x, rng, move |g, x| {
                let kv = g.constant(k.clone());
                let a = g.maximum(x, kv)?;
                let b = g.minimum(kv, x)?;
                g.sub(a, b)
            })
        }),
        ("sin_cos", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -4.0, 4.0), rng, |g, x| g.sin_cos(x))
        }),
        ("softmax_rows", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -3.0, 3.0), rng, |g, x| g.softmax(x, 1))
        }),
        ("softmax_cols", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -3.0, 3.0), rng, |g, x| g.softmax(x, 0))
        }),
        ("concat", true, |rng| {
            let (r, c) = dims(rng);
            let k = uniform(rng, &[r, 2], -1.0, 1.0);
            let k2 = uniform(rng, &[1, c + 2], -1.0, 1.0);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, move |g, x| {
                let kv = g.constant(k.clone());
                let a = g.concat(&[kv, x], 1)?;
                let kv2 = g.constant(k2.clone());
                g.concat(&[a, kv2, a], 0)
            })
        }),
        ("reshape_transpose", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, move |g, x| {
                let t = g.transpose(x)?;
                let f = g.reshape(t, &[r * c, 1])?;
                g.mul(f, f)
            })
        }),
        ("slice", true, |rng| {
            let (r, c) = dims(rng);
            let c = c + 1;
            let start = rng.gen_range(0..c - 1);
            let end = rng.gen_range(start + 1..=c);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, move |g, x| {
                let s = g.slice(x, 1, start, end)?;
                g.slice(s, 0, 0, r)
            })
        }),
        ("layer_norm_input", true, |rng| {
            let (r, c) = dims(rng);
            let c = c + 1;
            let gamma = uniform(rng, &[c], 0.5, 1.5);
            let beta = uniform(rng, &[c], -0.5, 0.5);
            case(uniform(rng, &[r, c], -2.0, 2.0), rng, move |g, x| {
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                g.layer_norm(x, gv, bv, LAYER_NORM_EPS)
            })
        }),
        ("layer_norm_affine", true, |rng| {
            let (r, c) = dims(rng);
            let c = c + 1;
            let x = uniform(rng, &[r, c], -2.0, 2.0);
            case(uniform(rng, &[2, c], 0.5, 1.5), rng, move |g, p| {
                let xv = g.constant(x.clone());
                let gamma = g.slice(p, 0, 0, 1)?;
                let gamma = g.reshape(gamma, &[c])?;
                let beta = g.slice(p, 0, 1, 2)?;
                let beta = g.reshape(beta, &[c])?;
                g.layer_norm(xv, gamma, beta, LAYER_NORM_EPS)
            })
        }),
        ("add_bias", true, |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, &[r, c], -1.0, 1.0);
            case(uniform(rng, &[c], -1.0, 1.0), rng, move |g, b| {
                let xv = g.constant(x.clone());
                let y = g.add_bias(xv, b)?;
                g.mul(y, y)
            })
        }),
        ("sum_mean", true, |rng| {
            let (r, c) = dims(rng);
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.sum(sq)?;
                let m = g.mean(x)?;
                let p = g.mul(s, m)?;
                g.add(p, s)
            })
        }),
        ("select_rows", true, |rng| {
            let (r, c) = dims(rng);
            let rows: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..r)).collect();
            case(uniform(rng, &[r, c], -1.0, 1.0), rng, move |g, x| {
                let s = g.select_rows(x, &rows)?;
                g.mul(s, s)
            })
        }),
        ("batched_matvec_matrices", true, |rng| {
            let (b, r) = dims(rng);
            let c = rng.gen_range(1..=4);
            let v = uniform(rng, &[b, c], -1.0, 1.0);
            case(uniform(rng, &[b, r, c], -1.0, 1.0), rng, move |g, m| {
                let vv = g.constant(v.clone());
                g.batched_matvec(m, vv)
            })
        }),
        ("batched_matvec_vectors", true, |rng| {
            let (b, r) = dims(rng);
            let c = rng.gen_range(1..=4);
            let m = uniform(rng, &[b, r, c], -1.0, 1.0);
            case(uniform(rng, &[b, c], -1.0, 1.0), rng, move |g, v| {
                let mv = g.constant(m.clone());
                g.batched_matvec(mv, v)
            })
        }),
        ("composite", true, |rng| {
            let (r, k) = dims(rng);
            let b = uniform(rng, &[k, 3], -1.0, 1.0);
            case(uniform(rng, &[r, k], -1.0, 1.0), rng, move |g, x| {
                let bv = g.constant(b.clone());
                let y = g.matmul(x, bv)?;
                let s = g.sigmoid(y)?;
                g.softmax(s, 1)
            })
        }),
    ]
}

struct Tracker {
    module: &'static str,
    out: Vec<CheckOutcome>,
}

impl Tracker {
    fn record(&mut self, name: &str, p: Probe, tolerance: f64) {
        match self.out.iter_mut().find(|o| o.name == name) {
            Some(o) => {
                o.cases += 1;
                o.coordinates += p.coordinates;
                o.refined += p.refined;
                o.max_rel_error = o.max_rel_error.max(p.err);
            }
            None => self.out.push(CheckOutcome {
                module: self.module,
                name: name.to_string(),
                cases: 1,
                coordinates: p.coordinates,
                refined: p.refined,
                max_rel_error: p.err,
                tolerance,
            }),
        }
    }
}

fn check_tensor(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "tensor",
        out: Vec::new(),
    };
    for (name, smooth, build) in primitives() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = build(&mut rng)?;
            let coords: Vec<usize> = (0..c.x.numel()).collect();
            let r = finite_diff_check_at(&c.f, &c.x, STEP, &coords)?;
            let tol = if smooth { SMOOTH_TOLERANCE } else { TOLERANCE };
            t.record(name, r.into(), tol);
        }
    }
    Ok(t.out)
}

fn check_positional(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "positional",
        out: Vec::new(),
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=4);
        let d = 4 * rng.gen_range(1..=4);
        let c = case(uniform(&mut rng, &[n, 2], 0.05, 0.95), &mut rng, move |g, x| {
            embed_points(g, x, d, DEFAULT_TEMPERATURE)
        })?;
        let all: Vec<usize> = (0..c.x.numel()).collect();
        let r = finite_diff_check_at(&c.f, &c.x, STEP, &all)?;
        t.record("embed_points", r.into(), SMOOTH_TOLERANCE);
    }
    Ok(t.out)
}

/// Checks every parameter tensor of `store` (up to `per_tensor` coordinates
/// each, all when `None`) and the optional external input.
fn check_store(
    store: &ParamStore,
    per_tensor: Option<usize>,
    rng: &mut ChaCha8Rng,
    kinked: bool,
    f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>,
) -> Result<Probe> {
    let mut total = Probe::default();
    for id in store.ids() {
        let x = store.get(id);
        let n = x.numel();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let r = probe(
            &|g: &mut Graph, v: Var| {
                let p = store.bind_with(g, id, v);
                f(g, &p)
            },
            x,
            &coords,
            kinked,
        )?;
        total = total.join(r);
    }
    Ok(total)
}

fn check_input(x: &Tensor, kinked: bool, f: &dyn Fn(&mut Graph, Var) -> Result<Var>) -> Result<Probe> {
    let all: Vec<usize> = (0..x.numel()).collect();
    probe(f, x, &all, kinked)
}

fn probe(f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor, coords: &[usize], kinked: bool) -> Result<Probe> {
    let r = if kinked {
        finite_diff_check_kinked_at(f, x, STEP, coords, TOLERANCE)?
    } else {
        finite_diff_check_at(f, x, STEP, coords)?
    };
    Ok(r.into())
}

/// Moves every parameter off its initial value. Zero biases with a zero
/// first-layer content query feed an exactly constant row to layer norm,
/// whose `1/sqrt(eps)` curvature swamps a central difference at [`STEP`].
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

fn fresh(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn check_attention(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "attention",
        out: Vec::new(),
    };
    let (d, m, n, keys) = (8, 2, 3, 4);
    for seed in 0..seeds {
        let (mut store, mut rng) = fresh(seed);
        let sa = SelfAttention::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Transformer,
            },
            "sa",
            d,
            m,
        )?;
        let x = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let pos = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let w = weights_for(&mut rng, &[n, d]);
        let xc = x.clone();
        let run = |g: &mut Graph, p: &Bound, xv: Var| -> Result<Var> {
            let pv = g.constant(pos.clone());
            let y = sa.forward(g, p, xv, pv)?;
            weighted(g, y, &w)
        };
        let e = check_store(&store, None, &mut rng, false, &|g, p| {
            let xv = g.constant(xc.clone());
            run(g, p, xv)
        })?;
        let e2 = check_input(&x, false, &|g, xv| {
            let p = store.bind(g, false);
            run(g, &p, xv)
        })?;
        t.record("self_attention", e.join(e2), SMOOTH_TOLERANCE);

        for variant in [AttentionVariant::Additive, AttentionVariant::Conditional] {
            let (mut store, mut rng) = fresh(seed);
            let ca = CrossAttention::new(
                &mut Init {
                    store: &mut store,
                    rng: &mut rng,
                    group: ParamGroup::Transformer,
                },
                "ca",
                AttentionConfig::new(d, m, variant)?,
            );
            let cq = uniform(&mut rng, &[n, d], -1.0, 1.0);
            let pq = uniform(&mut rng, &[n, d], -1.0, 1.0);
            let ck = uniform(&mut rng, &[keys, d], -1.0, 1.0);
            let pk = uniform(&mut rng, &[keys, d], -1.0, 1.0);
            let w = weights_for(&mut rng, &[n, d]);
            // All four inputs packed into one tensor so a single check covers them.
            let packed = Tensor::new(
                vec![2 * n + 2 * keys, d],
                [cq.data(), pq.data(), ck.data(), pk.data()].concat(),
            )?;
            let run = |g: &mut Graph, p: &Bound, x: Var| -> Result<Var> {
                let c_q = g.slice(x, 0, 0, n)?;
                let p_q = g.slice(x, 0, n, 2 * n)?;
                let c_k = g.slice(x, 0, 2 * n, 2 * n + keys)?;
                let p_k = g.slice(x, 0, 2 * n + keys, 2 * n + 2 * keys)?;
                let mem = MemoryFeatures {
                    content: c_k,
                    positions: p_k,
                    height: 2,
                    width: 2,
                };
                let inputs = CrossInputs {
                    content_query: c_q,
                    spatial_query: p_q,
                    key_content: None,
                };
                let out = ca.forward(g, p, &inputs, &mem, false)?;
                weighted(g, out.output, &w)
            };
            let e = check_store(&store, None, &mut rng, false, &|g, p| {
                let x = g.constant(packed.clone());
                run(g, p, x)
            })?;
            let e2 = check_input(&packed, false, &|g, x| {
                let p = store.bind(g, false);
                run(g, &p, x)
            })?;
            let name = match variant {
                AttentionVariant::Additive => "cross_attention_additive",
                AttentionVariant::Conditional => "cross_attention_conditional",
            };
            t.record(name, e.join(e2), SMOOTH_TOLERANCE);
        }
    }
    Ok(t.out)
}

fn check_encoder(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "encoder",
        out: Vec::new(),
    };
    let (d, m) = (8, 2);
    for seed in 0..seeds {
        let (mut store, mut rng) = fresh(seed);
        let enc = Encoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Transformer,
            },
            2,
            d,
            m,
        )?;
        jitter(&mut store, &mut rng);
        let emb = uniform(&mut rng, &[4, d], -1.0, 1.0);
        let pos = grid_embeddings(2, 2, d, DEFAULT_TEMPERATURE)?;
        let w = weights_for(&mut rng, &[4, d]);
        let run = |g: &mut Graph, p: &Bound, x: Var| -> Result<Var> {
            let pv = g.constant(pos.clone());
            let mem = enc.forward(g, p, x, pv, 2, 2)?;
            weighted(g, mem.content, &w)
        };
        let e = check_store(&store, None, &mut rng, true, &|g, p| {
            let x = g.constant(emb.clone());
            run(g, p, x)
        })?;
        let e2 = check_input(&emb, true, &|g, x| {
            let p = store.bind(g, false);
            run(g, &p, x)
        })?;
        t.record("encoder_2x2", e.join(e2), TOLERANCE);
    }
    Ok(t.out)
}

/// Cycles through the ablation space so every option is exercised.
fn decoder_config(seed: u64) -> DecoderConfig {
    let s = seed as usize;
    DecoderConfig {
        width: 8,
        heads: 2,
        layers: 2,
        queries: 3,
        classes: 2,
        variant: if s % 2 == 0 {
            AttentionVariant::Conditional
        } else {
            AttentionVariant::Additive
        },
        csq: CsqVariant::ALL[s % 5],
        projection: ProjectionForm::ALL[(s / 5) % 5],
        reference: ReferenceMode::ALL[s % 3],
        offset_regression: s % 4 < 2,
        first_layer: if s % 7 == 3 {
            FirstLayerRule::AddPositional
        } else {
            FirstLayerRule::UnitTransform
        },
        temperature: DEFAULT_TEMPERATURE,
    }
}

fn check_decoder(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "decoder",
        out: Vec::new(),
    };
    for seed in 0..seeds {
        let cfg = decoder_config(seed);
        let (mut store, mut rng) = fresh(seed);
        let dec = Decoder::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Transformer,
            },
            cfg.clone(),
        )?;
        jitter(&mut store, &mut rng);
        let ck = uniform(&mut rng, &[4, cfg.width], -1.0, 1.0);
        let pk = grid_embeddings(2, 2, cfg.width, cfg.temperature)?;
        let wl = weights_for(&mut rng, &[cfg.queries, cfg.classes]);
        let wb = weights_for(&mut rng, &[cfg.queries, 4]);
        let run = |g: &mut Graph, p: &Bound, content: Var| -> Result<Var> {
            let positions = g.constant(pk.clone());
            let mem = MemoryFeatures {
                content,
                positions,
                height: 2,
                width: 2,
            };
            let out = dec.forward(g, p, &mem, false)?;
            let mut total: Option<Var> = None;
            for l in &out.layers {
                let a = weighted(g, l.logits, &wl)?;
                let b = weighted(g, l.boxes, &wb)?;
                let s = g.add(a, b)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.expect("at least one layer"))
        };
        let e = check_store(&store, Some(12), &mut rng, true, &|g, p| {
            let c = g.constant(ck.clone());
            run(g, p, c)
        })?;
        let e2 = check_input(&ck, true, &|g, c| {
            let p = store.bind(g, false);
            run(g, &p, c)
        })?;
        t.record("decoder_stack", e.join(e2), TOLERANCE);

        // L1 box loss against the embedding fed to the box head.
        let f0 = uniform(&mut rng, &[cfg.queries, cfg.width], -1.0, 1.0);
        let target = uniform(&mut rng, &[cfg.queries, 4], 0.2, 0.8);
        let e = check_input(&f0, true, &|g, f| {
            let p = store.bind(g, false);
            let s = dec.reference_points(g, &p)?;
            let b = dec.box_head(g, &p, f, s)?;
            let tv = g.constant(target.clone());
            let diff = g.sub(b, tv)?;
            let a = g.abs(diff)?;
            g.sum(a)
        })?;
        t.record("box_head_l1", e, TOLERANCE);
    }
    Ok(t.out)
}

fn check_loss(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "loss",
        out: Vec::new(),
    };
    let (n, c) = (4, 3);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=3);
        let truth = GroundTruthSet {
            boxes: (0..k)
                .map(|_| {
                    [
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.1..0.4),
                        rng.gen_range(0.1..0.4),
                    ]
                })
                .collect(),
            classes: (0..k).map(|_| rng.gen_range(0..c)).collect(),
        };
        // Two layers of raw logits and pre-sigmoid boxes in one tensor.
        let x = uniform(&mut rng, &[4 * n, c + 4], -1.5, 1.5);
        for (name, class_loss) in [("set_loss_focal", ClassLoss::Focal), ("set_loss_bce", ClassLoss::CrossEntropy)] {
            let truth = truth.clone();
            let e = check_input(&x, true, &|g, x| {
                let mut preds = Vec::new();
                for l in 0..2 {
                    let rows = g.slice(x, 0, 2 * l * n, 2 * l * n + n)?;
                    let logits = g.slice(rows, 1, 0, c)?;
                    let raw = g.slice(rows, 1, c, c + 4)?;
                    let boxes = g.sigmoid(raw)?;
                    preds.push((logits, boxes));
                }
                Ok(set_loss(g, &preds, &truth, &LossWeights::default(), class_loss)?.total)
            })?;
            t.record(name, e, TOLERANCE);
        }
    }
    Ok(t.out)
}

/// Smallest end-to-end instance: 16×16 image, 8px patches (2×2 grid),
/// two queries.
pub fn pipeline_config(seed: u64, objects: usize) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.width = 8;
    c.heads = 2;
    c.encoder_layers = 1;
    c.decoder_layers = 2;
    c.queries = 2;
    c.iterations = 1;
    c.lr_drop = 0;
    c.batch_size = 1;
    c.seed = seed;
    c.scene.image_size = 16;
    c.scene.patch = 8;
    c.scene.min_objects = objects;
    c.scene.max_objects = objects;
    c.scene.min_size = 0.25;
    c.scene.max_size = 0.45;
    c.scene.seed = seed;
    c
}

fn check_pipeline(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut t = Tracker {
        module: "pipeline",
        out: Vec::new(),
    };
    for (name, objects) in [("pipeline_1_object", 1), ("pipeline_2_objects", 2)] {
        for seed in 0..seeds {
            let cfg = pipeline_config(seed, objects);
            let (model, mut store) = Detector::new(&cfg)?;
            let scene = generate_scene(&cfg.scene, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            jitter(&mut store, &mut rng);
            let e = check_store(&store, Some(6), &mut rng, true, &|g, p| {
                Ok(model.scene_loss(g, p, &scene)?.total)
            })?;
            t.record(name, e, TOLERANCE);
        }
    }
    Ok(t.out)
}

/// Runs the gradient suites, all of them or the one named by `module`.
pub fn gradient_checks(module: Option<&str>, size: SuiteSize) -> Result<Vec<CheckOutcome>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Invalid(format!(
                "unknown module `{m}`, expected one of {}",
                MODULES.join(", ")
            )));
        }
    }
    let want = |m: &str| module.map_or(true, |x| x == m);
    let mut out = Vec::new();
    if want("tensor") {
        out.extend(check_tensor(size.primitive_seeds)?);
    }
    if want("positional") {
        out.extend(check_positional(size.primitive_seeds)?);
    }
    if want("attention") {
        out.extend(check_attention(size.block_seeds)?);
    }
    if want("encoder") {
        out.extend(check_encoder(size.block_seeds)?);
    }
    if want("decoder") {
        out.extend(check_decoder(size.block_seeds.max(25))?);
    }
    if want("loss") {
        out.extend(check_loss(size.primitive_seeds)?);
    }
    if want("pipeline") {
        out.extend(check_pipeline(size.pipeline_seeds)?);
    }
    Ok(out)
}

/// Hungarian versus exhaustive matching on one `K × N` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    pub rows: usize,
    pub cols: usize,
    pub matrices: usize,
    pub mismatches: usize,
}

/// Compares both solvers on `matrices` random matrices for every
/// `K ∈ 1..=max_rows`, `N ∈ K..=max_cols`. Agreement means identical
/// assignments and bit-identical totals.
pub fn oracle_check(matrices: usize, max_rows: usize, max_cols: usize, seed: u64) -> Result<Vec<OracleOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 1..=max_rows {
        for n in k..=max_cols {
            let mut mismatches = 0;
            for i in 0..matrices {
                // Every fourth matrix uses small integers so ties are common.
                let cost: Vec<Vec<f64>> = (0..k)
                    .map(|_| {
                        (0..n)
                            .map(|_| {
                                if i % 4 == 3 {
                                    rng.gen_range(0..4) as f64
                                } else {
                                    rng.gen_range(-10.0..10.0)
                                }
                            })
                            .collect()
                    })
                    .collect();
                let h = hungarian_match(&cost)?;
                let b = brute_force_match(&cost)?;
                if h != b || h.total(&cost).to_bits() != b.total(&cost).to_bits() {
                    mismatches += 1;
                }
            }
            out.push(OracleOutcome {
                rows: k,
                cols: n,
                matrices,
                mismatches,
            });
        }
    }
    Ok(out)
}

