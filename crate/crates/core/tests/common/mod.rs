#![allow(dead_code)]

use cellnas::autodiff::{ConvGeom, PoolKind, Tape, Var};
use cellnas::cell::{Bottom, CellTemplate};
use cellnas::genotype::{Genotype, GenotypeEdge};
use cellnas::losses::{batch_hard_triplet, center_loss, classification_loss, joint_loss};
use cellnas::network::{Network, NetworkPlan};
use cellnas::nn::{Mode, ParamGroup, ParamStore};
use cellnas::search_space::{mixed_op, partial_mixed_op, sample_mask, Candidate, MixedEdge, OpKind, NUM_CANDIDATES};
use cellnas::{Result, SeededRng, Tensor};
use rand::{Rng, SeedableRng};

pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;
const H: f64 = 1e-6;

pub fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// `sum(v * r)` for a fixed random `r`, turning any output into a scalar with a
/// generic upstream gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x9e37);
    let w = random_tensor(tape.shape(v), &mut r);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Max relative error between backward and central differences for a scalar
/// function of the leaf tensors `inputs`.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Like [`gradcheck`] for a module whose parameters live in `store`: checks
/// the input and every trainable parameter.
pub fn gradcheck_module(
    store: &mut ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Tape, &mut ParamStore, Var) -> Result<Var>,
) -> f64 {
    let eval = |store: &mut ParamStore, x: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = f(&mut tape, store, xv).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, store, xv).unwrap();
    let grads = tape.backward(out).unwrap();
    store.zero_grad();
    store.accumulate(&tape, &grads);
    let gx = grads.get(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[j] += H;
        let mut minus = x.clone();
        minus.data_mut()[j] -= H;
        let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * H);
        worst = worst.max(rel_err(gx[j], numeric));
    }
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(store.get(id).group)).collect();
    for id in ids {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        for j in 0..analytic.len() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + H;
            let up = eval(store, x);
            store.get_mut(id).value.data_mut()[j] = orig - H;
            let down = eval(store, x);
            store.get_mut(id).value.data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * H)));
        }
    }
    worst
}

const TRAIN: Mode = Mode::Train { update_stats: false };

fn labels_for(m: usize, n: usize) -> Vec<usize> {
    (0..m).flat_map(|id| std::iter::repeat_n(id, n)).collect()
}

/// One differentiable operation or loss with a random-instance generator
/// returning the max relative gradient error of instance `seed`.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn candidate_case(kind: OpKind, stride: usize, affine: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let c = 3;
    let cand = Candidate::new(&mut store, &mut r, "op", kind, c, stride, affine).unwrap();
    let x = random_tensor(&[2, c, 6, 6], &mut r);
    gradcheck_module(&mut store, &x, |tape, store, x| {
        let y = cand.forward(tape, store, x, TRAIN)?;
        weighted_sum(tape, y, seed)
    })
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d",
            run: |s| {
                let mut r = rng(s);
                let stride = 1 + (s % 2) as usize;
                let x = random_tensor(&[2, 2, 5, 5], &mut r);
                let w = random_tensor(&[3, 2, 3, 3], &mut r);
                gradcheck(&[x, w], |t, v| {
                    let y = t.conv2d(v[0], v[1], ConvGeom::simple(stride, 1))?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "conv2d_dilated_depthwise",
            run: |s| {
                let mut r = rng(s);
                let x = random_tensor(&[2, 3, 6, 6], &mut r);
                let w = random_tensor(&[3, 1, 3, 3], &mut r);
                gradcheck(&[x, w], |t, v| {
                    let y = t.conv2d(v[0], v[1], ConvGeom::new(1 + (s % 2) as usize, 2, 2, 3))?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "max_pool",
            run: |s| {
                let x = random_tensor(&[2, 2, 5, 5], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.pool2d(v[0], PoolKind::Max, 3, 1 + (s % 2) as usize, 1)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "avg_pool",
            run: |s| {
                let x = random_tensor(&[2, 2, 5, 5], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.pool2d(v[0], PoolKind::Avg, 3, 1 + (s % 2) as usize, 1)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "batch_norm_train",
            run: |s| {
                let mut r = rng(s);
                let x = random_tensor(&[3, 2, 2, 2], &mut r);
                let g = random_tensor(&[2], &mut r);
                let b = random_tensor(&[2], &mut r);
                gradcheck(&[x, g, b], |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], Some(v[1]), Some(v[2]))?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "batch_norm_train_plain",
            run: |s| {
                let x = random_tensor(&[3, 2, 2, 2], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], None, None)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "batch_norm_eval",
            run: |s| {
                let mut r = rng(s);
                let x = random_tensor(&[2, 2, 3, 3], &mut r);
                let g = random_tensor(&[2], &mut r);
                let b = random_tensor(&[2], &mut r);
                let mean = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
                let var = [r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
                gradcheck(&[x, g, b], |t, v| {
                    let y = t.batch_norm_eval(v[0], Some(v[1]), Some(v[2]), &mean, &var)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "relu",
            run: |s| {
                let x = random_tensor(&[4, 5], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.relu(v[0])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "sigmoid",
            run: |s| {
                let x = random_tensor(&[4, 5], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.sigmoid(v[0])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "softmax",
            run: |s| {
                let x = random_tensor(&[3, 4, 2], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.softmax(v[0], (s % 3) as usize)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "add_sub_mul_scale",
            run: |s| {
                let mut r = rng(s);
                let a = random_tensor(&[3, 4], &mut r);
                let b = random_tensor(&[3, 4], &mut r);
                gradcheck(&[a, b], |t, v| {
                    let p = t.mul(v[0], v[1])?;
                    let q = t.add(p, v[0])?;
                    let d = t.sub(q, v[1])?;
                    let y = t.scale(d, -1.7)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "concat_gather_merge",
            run: |s| {
                let mut r = rng(s);
                let a = random_tensor(&[2, 2, 3, 3], &mut r);
                let b = random_tensor(&[2, 3, 3, 3], &mut r);
                gradcheck(&[a, b], |t, v| {
                    let c = t.concat_channels(&[v[0], v[1]])?;
                    let sel = t.gather_channels(c, &[0, 3])?;
                    let rest = t.gather_channels(c, &[1, 2, 4])?;
                    let sq = t.mul(sel, sel)?;
                    let y = t.merge_channels(sq, rest, &[true, false, false, true, false])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "replace_channels",
            run: |s| {
                let mut r = rng(s);
                let a = random_tensor(&[2, 4, 3, 3], &mut r);
                let b = random_tensor(&[2, 1, 3, 3], &mut r);
                gradcheck(&[a, b], |t, v| {
                    let y = t.replace_channels(v[0], v[1], &[false, false, true, false])?;
                    let y = t.mul(y, y)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "shift2d",
            run: |s| {
                let x = random_tensor(&[2, 2, 4, 4], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.shift2d(v[0], 1, (s % 2) as usize)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "global_avg_pool",
            run: |s| {
                let x = random_tensor(&[2, 3, 3, 4], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.global_avg_pool(v[0])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "linear",
            run: |s| {
                let mut r = rng(s);
                let x = random_tensor(&[3, 4], &mut r);
                let w = random_tensor(&[2, 4], &mut r);
                let b = random_tensor(&[2], &mut r);
                gradcheck(&[x, w, b], |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "mix",
            run: |s| {
                let mut r = rng(s);
                let w = random_tensor(&[3], &mut r);
                let a = random_tensor(&[2, 3], &mut r);
                let b = random_tensor(&[2, 3], &mut r);
                let c = random_tensor(&[2, 3], &mut r);
                gradcheck(&[w, a, b, c], |t, v| {
                    let p = t.softmax(v[0], 0)?;
                    let y = t.mix(p, &[v[1], v[2], v[3]])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "slice_rows",
            run: |s| {
                let x = random_tensor(&[5, 3], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.slice_rows(v[0], 1, 3)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "pairwise_distance",
            run: |s| {
                let x = random_tensor(&[4, 3], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.pairwise_distance(v[0])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "row_distance",
            run: |s| {
                let mut r = rng(s);
                let a = random_tensor(&[4, 3], &mut r);
                let b = random_tensor(&[4, 3], &mut r);
                gradcheck(&[a, b], |t, v| {
                    let y = t.row_distance(v[0], v[1])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "l2_normalize_rows",
            run: |s| {
                let x = random_tensor(&[3, 4], &mut rng(s));
                gradcheck(&[x], |t, v| {
                    let y = t.l2_normalize_rows(v[0])?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "classification_loss",
            run: |s| {
                let mut r = rng(s);
                let logits = random_tensor(&[6, 1], &mut r);
                let targets: Vec<f64> = (0..6).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
                gradcheck(&[logits], |t, v| {
                    let h = t.sigmoid(v[0])?;
                    classification_loss(t, h, &targets)
                })
            },
        },
        GradCase {
            name: "batch_hard_triplet",
            run: |s| {
                let (m, n) = (3, 2 + (s % 2) as usize);
                let x = random_tensor(&[m * n, 4], &mut rng(s));
                let labels = labels_for(m, n);
                gradcheck(&[x], |t, v| batch_hard_triplet(t, v[0], &labels, 0.3 + (s % 3) as f64))
            },
        },
        GradCase {
            name: "center_loss",
            run: |s| {
                let mut r = rng(s);
                let a = random_tensor(&[4, 3], &mut r);
                let b = random_tensor(&[4, 3], &mut r);
                gradcheck(&[a, b], |t, v| center_loss(t, v[0], v[1]))
            },
        },
        GradCase {
            name: "joint_loss",
            run: |s| {
                let mut r = rng(s);
                let emb = random_tensor(&[8, 3], &mut r);
                let logits = random_tensor(&[12, 1], &mut r);
                let targets: Vec<f64> = (0..12).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
                let labels = labels_for(2, 2);
                let gamma = [0.0, 0.5, 1.0][(s % 3) as usize];
                gradcheck(&[emb, logits], |t, v| {
                    let h = t.sigmoid(v[1])?;
                    let cls = classification_loss(t, h, &targets)?;
                    let gt = t.slice_rows(v[0], 0, 4)?;
                    let jit = t.slice_rows(v[0], 4, 4)?;
                    let tri = batch_hard_triplet(t, gt, &labels, 0.3)?;
                    let cen = center_loss(t, jit, gt)?;
                    joint_loss(t, cls, tri, cen, gamma)
                })
            },
        },
        GradCase {
            name: "op_max_pool_3x3",
            run: |s| candidate_case(OpKind::MaxPool3x3, 1 + (s % 2) as usize, false, s),
        },
        GradCase {
            name: "op_avg_pool_3x3",
            run: |s| candidate_case(OpKind::AvgPool3x3, 1 + (s % 2) as usize, false, s),
        },
        GradCase {
            name: "op_sep_conv_3x3",
            run: |s| candidate_case(OpKind::SepConv3x3, 1 + (s % 2) as usize, s % 3 == 0, s),
        },
        GradCase {
            name: "op_sep_conv_5x5",
            run: |s| candidate_case(OpKind::SepConv5x5, 1 + (s % 2) as usize, s % 3 == 0, s),
        },
        GradCase {
            name: "op_skip_connect",
            run: |s| candidate_case(OpKind::SkipConnect, 1 + (s % 2) as usize, s % 3 == 0, s),
        },
        GradCase {
            name: "op_dil_conv_3x3",
            run: |s| candidate_case(OpKind::DilConv3x3, 1 + (s % 2) as usize, s % 3 == 0, s),
        },
        GradCase {
            name: "op_dil_conv_5x5",
            run: |s| candidate_case(OpKind::DilConv5x5, 1 + (s % 2) as usize, s % 3 == 0, s),
        },
        GradCase {
            name: "mixed_op",
            run: |s| {
                let mut r = rng(s);
                let mut store = ParamStore::new();
                let edge = MixedEdge::new(&mut store, &mut r, "e", 0, 2, 1 + (s % 2) as usize, 1.0, false).unwrap();
                let alpha = store.add("alpha", ParamGroup::Arch, random_tensor(&[8], &mut r));
                let x = random_tensor(&[2, 2, 4, 4], &mut r);
                gradcheck_module(&mut store, &x, |t, store, x| {
                    let a = store.var(t, alpha);
                    let y = mixed_op(t, store, x, a, &edge.candidates, TRAIN)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "partial_mixed_op",
            run: |s| {
                let mut r = rng(s);
                let mut store = ParamStore::new();
                let edge = MixedEdge::new(&mut store, &mut r, "e", 0, 4, 1 + (s % 2) as usize, 0.25, false).unwrap();
                let alpha = store.add("alpha", ParamGroup::Arch, random_tensor(&[8], &mut r));
                let mask = sample_mask(0, 4, 0.25, &mut r);
                let x = random_tensor(&[2, 4, 4, 4], &mut r);
                gradcheck_module(&mut store, &x, |t, store, x| {
                    let a = store.var(t, alpha);
                    let y = partial_mixed_op(t, store, x, a, &edge, &mask, TRAIN)?;
                    weighted_sum(t, y, s)
                })
            },
        },
        GradCase {
            name: "supernet",
            run: |s| {
                let mut r = rng(s);
                let bottom = if s % 2 == 0 { Bottom::Dual } else { Bottom::Single };
                let plan = NetworkPlan::new(bottom, 2, 2, 1, 3).unwrap();
                let net = std::cell::RefCell::new(Network::supernet(&plan, 0.5, &mut r).unwrap());
                let x = random_tensor(&[2, 3, 4, 4], &mut r);
                let mask_rng = rng(s + 1000);
                let mut store = net.borrow().store.clone();
                gradcheck_module(&mut store, &x, |t, store, x| {
                    let mut net = net.borrow_mut();
                    std::mem::swap(&mut net.store, store);
                    let out = net.forward(t, x, TRAIN, &mut mask_rng.clone());
                    std::mem::swap(&mut net.store, store);
                    let out = out?;
                    let e = weighted_sum(t, out.embedding, s)?;
                    let p = weighted_sum(t, out.prob, s + 1)?;
                    t.add(e, p)
                })
            },
        },
    ]
}

/// A small dual-bottom search over 8 synthetic identities x 32 frames
/// (256 samples) at 32x32.
pub fn toy_config() -> cellnas::config::RunConfig {
    let overrides: Vec<String> = [
        "seed=3",
        "network.bottom=\"dual\"",
        "network.cells=2",
        "network.reductions=1",
        "network.per_node_channels=4",
        "network.embedding_dim=16",
        "search.epochs=5",
        "retrain.epochs=3",
        "batch.identities=4",
        "batch.frames=2",
        "data.crop_size=16",
        "data.eval_identities=4",
        "data.synthetic.identities=8",
        "data.synthetic.frames_per_identity=32",
        "data.synthetic.image_size=32",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cellnas::config::RunConfig::default().with_overrides(&overrides).unwrap()
}

pub fn toy_dataset(config: &cellnas::config::RunConfig) -> cellnas::data::Dataset {
    cellnas::commands::training_dataset(config).unwrap()
}

pub fn store_values(store: &ParamStore, group: ParamGroup) -> Vec<Vec<u64>> {
    store
        .group_ids(group)
        .map(|id| store.get(id).value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exhaustive scan over all anchor pairs.
pub fn triplet_oracle(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut hardest_pos: f64 = 0.0;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..n {
            let d = dist(&rows[i], &rows[j]);
            if j != i && labels[j] == labels[i] {
                hardest_pos = hardest_pos.max(d);
            } else if labels[j] != labels[i] {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (hardest_pos - hardest_neg + margin).max(0.0);
    }
    total
}

pub fn triplet_value(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let d = rows[0].len();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap());
    let l = batch_hard_triplet(&mut tape, x, labels, margin).unwrap();
    tape.value(l).item()
}

pub fn random_batch(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let mut r = rng(seed);
    let m = r.random_range(2..5);
    let n = r.random_range(1..4);
    let d = r.random_range(1..6);
    let spread = r.random_range(0.1..3.0);
    let rows = (0..m * n).map(|_| (0..d).map(|_| r.random_range(-spread..spread)).collect()).collect();
    let labels = (0..m).flat_map(|id| std::iter::repeat_n(id, n)).collect();
    (rows, labels, r.random_range(0.0..1.0))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Enumerates every legal retention set of each node and keeps the best by
/// total score, ties going to the lexicographically smallest edge-id set.
pub fn oracle(alpha: &Tensor, template: &CellTemplate) -> Vec<GenotypeEdge> {
    let keep = template.bottom.inputs();
    let label = |id: usize| -> (OpKind, f64) {
        let p = softmax(&alpha.data()[id * NUM_CANDIDATES..(id + 1) * NUM_CANDIDATES]);
        let mut best = 1;
        for k in 2..NUM_CANDIDATES {
            if p[k] > p[best] {
                best = k;
            }
        }
        (OpKind::from_index(best).unwrap(), p[best])
    };
    let mut out = Vec::new();
    for to in template.intermediate_nodes() {
        let incoming: Vec<_> = template.incoming(to).copied().collect();
        let mut sets: Vec<Vec<usize>> = Vec::new();
        if keep == 1 {
            sets.extend((0..incoming.len()).map(|i| vec![i]));
        } else {
            for i in 0..incoming.len() {
                for j in i + 1..incoming.len() {
                    if incoming[i].from != incoming[j].from {
                        sets.push(vec![i, j]);
                    }
                }
            }
        }
        let score = |s: &Vec<usize>| s.iter().map(|&i| label(incoming[i].id).1).sum::<f64>();
        let mut best = &sets[0];
        for s in &sets[1..] {
            if score(s) > score(best) {
                best = s;
            }
        }
        out.extend(best.iter().map(|&i| GenotypeEdge {
            to,
            from: incoming[i].from,
            op: label(incoming[i].id).0,
        }));
    }
    out
}

pub fn random_alpha(edges: usize, r: &mut cellnas::SeededRng) -> Tensor {
    let scale = r.random_range(0.1..5.0);
    Tensor::new(vec![edges, NUM_CANDIDATES], (0..edges * NUM_CANDIDATES).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// `(params, macs)` of a discrete network, recomputed from layer formulas.
pub fn recount(g: &Genotype, embedding: usize, size: usize) -> (usize, u64) {
    let conv = |cin: usize, cout: usize, k: usize, groups: usize, hw: usize| {
        let p = cout * (cin / groups) * k * k;
        (p, (p * hw * hw) as u64)
    };
    let half = |n: usize| n.div_ceil(2);
    let inputs = match g.bottom {
        Bottom::Single => 1,
        Bottom::Dual => 2,
    };
    let mut params = 0;
    let mut macs = 0;
    let mut add = |(p, m): (usize, u64)| {
        params += p;
        macs += m;
    };

    let c0 = g.per_node_channels;
    add(conv(3, c0, 3, 1, size));
    add((2 * c0, 0));

    let mut c = c0;
    let mut chans = [c0, c0];
    let mut ext = [size, size];
    let mut prev_reduction = false;
    for k in 0..g.cells_total {
        let reduction = g.reduction_positions.contains(&(k + 1));
        if reduction {
            c *= 2;
        }
        if inputs == 2 {
            if prev_reduction {
                add(conv(chans[0], c - c / 2, 1, 1, half(ext[0])));
                add(conv(chans[0], c / 2, 1, 1, half(ext[0])));
            } else {
                add(conv(chans[0], c, 1, 1, ext[0]));
            }
            add((2 * c, 0));
        }
        add(conv(chans[1], c, 1, 1, ext[1]));
        add((2 * c, 0));

        let hw_in = ext[1];
        let hw_out = if reduction { half(hw_in) } else { hw_in };
        let edges = if reduction { &g.reduction_edges } else { &g.normal_edges };
        for e in edges {
            let strided = reduction && e.from < inputs;
            let hw_src = if e.from < inputs { hw_in } else { hw_out };
            match e.op {
                OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                    let kk = if e.op == OpKind::SepConv3x3 { 3 } else { 5 };
                    add(conv(c, c, kk, c, hw_out));
                    add(conv(c, c, 1, 1, hw_out));
                    add((4 * c, 0));
                }
                OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                    let kk = if e.op == OpKind::DilConv3x3 { 3 } else { 5 };
                    add(conv(c, c, kk, c, hw_out));
                    add(conv(c, c, 1, 1, hw_out));
                    add((2 * c, 0));
                }
                OpKind::SkipConnect if strided => {
                    add(conv(c, c - c / 2, 1, 1, half(hw_src)));
                    add(conv(c, c / 2, 1, 1, half(hw_src)));
                    add((2 * c, 0));
                }
                _ => {}
            }
        }
        chans = [chans[1], 4 * c];
        ext = [ext[1], hw_out];
        prev_reduction = reduction;
    }
    add((chans[1] * embedding + embedding, (chans[1] * embedding) as u64));
    add((embedding + 1, embedding as u64));
    (params, macs)
}
