//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ginot::layers::{AttentionBlock, Mlp, LAYER_NORM_EPS};
use ginot::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use ginot::pointcloud::{FpsInit, PointCloud};
use ginot::solution_decoder::QueryBatch;
use ginot::{Ginot, GinotConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CONFIGS: u64 = 20;

pub fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts `y` with fixed pseudo-random weights so every output entry matters.
pub fn probe(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64 + 17);
    let w = tape.input(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub fn loss(store: &ParamStore, f: &impl Fn(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new(store);
    let r = f(&mut tape);
    tape.value(r)[0]
}

/// Relative error `‖analytic − numeric‖ / ‖numeric‖` over every parameter entry.
pub fn grad_error(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store);
        let r = f(&mut tape);
        let g = tape.backward(r).unwrap();
        store
            .ids()
            .map(|id| match g.get(id) {
                Some(v) => v.to_vec(),
                None => vec![0.0; store.get(id).len()],
            })
            .collect()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let (mut diff, mut norm) = (0.0, 0.0);
    for (id, a) in ids.into_iter().zip(&analytic) {
        for j in 0..a.len() {
            let x0 = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = x0 + STEP;
            let up = loss(store, &f);
            store.get_mut(id).data_mut()[j] = x0 - STEP;
            let down = loss(store, &f);
            store.get_mut(id).data_mut()[j] = x0;
            let n = (up - down) / (2.0 * STEP);
            diff += (a[j] - n).powi(2);
            norm += n * n;
        }
    }
    assert!(norm > 0.0, "numeric gradient vanished");
    (diff / norm).sqrt()
}


fn linear_case(rng: &mut ChaCha8Rng, with_bias: bool) -> f64 {
        let (n, k, m) = (dims(rng, 5), dims(rng, 6), dims(rng, 5));
        let mut ps = ParamStore::new();
        let x = ps.add("x", random(rng, &[n, k], -1.0, 1.0));
        let w = ps.add("w", random(rng, &[k, m], -1.0, 1.0));
        let b = ps.add("b", random(rng, &[m], -1.0, 1.0));
        grad_error(&mut ps, |t| {
            let (xv, wv) = (t.param(x), t.param(w));
            let bv = with_bias.then(|| t.param(b));
            let y = t.linear(xv, wv, bv).unwrap();
            probe(t, y)
        })
}

pub fn linear_with_bias(rng: &mut ChaCha8Rng) -> f64 {
    linear_case(rng, true)
}

pub fn linear_without_bias(rng: &mut ChaCha8Rng) -> f64 {
    linear_case(rng, false)
}

pub fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k, m) = (dims(rng, 5), dims(rng, 6), dims(rng, 5));
    let mut ps = ParamStore::new();
    let x = ps.add("x", random(rng, &[n, k], -1.0, 1.0));
    let w = ps.add("w", random(rng, &[k, m], -1.0, 1.0));
    grad_error(&mut ps, |t| {
        let (xv, wv) = (t.param(x), t.param(w));
        let y = t.matmul(xv, wv).unwrap();
        probe(t, y)
    })
}

pub fn elementwise_add_mul_scale(rng: &mut ChaCha8Rng) -> f64 {
    let shape = [dims(rng, 4), dims(rng, 5)];
    let s = rng.gen_range(-2.0..2.0);
    let mut ps = ParamStore::new();
    let a = ps.add("a", random(rng, &shape, -1.0, 1.0));
    let b = ps.add("b", random(rng, &shape, -1.0, 1.0));
    grad_error(&mut ps, |t| {
        let (av, bv) = (t.param(a), t.param(b));
        let p = t.mul(av, bv).unwrap();
        let q = t.add(p, av).unwrap();
        let y = t.scale(q, s);
        probe(t, y)
    })
}

pub fn gelu(rng: &mut ChaCha8Rng) -> f64 {
    let mut ps = ParamStore::new();
    let shape = [dims(rng, 4), dims(rng, 6)];
    let x = ps.add("x", random(rng, &shape, -3.0, 3.0));
    grad_error(&mut ps, |t| {
        let xv = t.param(x);
        let y = t.gelu(xv);
        probe(t, y)
    })
}

pub fn layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (dims(rng, 4), rng.gen_range(2..=8));
    let mut ps = ParamStore::new();
    let x = ps.add("x", random(rng, &[n, d], -2.0, 2.0));
    let g = ps.add("g", random(rng, &[d], 0.5, 1.5));
    let b = ps.add("b", random(rng, &[d], -0.5, 0.5));
    grad_error(&mut ps, |t| {
        let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
        let y = t.layer_norm(xv, gv, bv, LAYER_NORM_EPS).unwrap();
        probe(t, y)
    })
}

pub fn masked_multi_head_attention(rng: &mut ChaCha8Rng) -> f64 {
    let heads = rng.gen_range(1..=3);
    let w = heads * rng.gen_range(1..=3);
    let (nq, nk) = (dims(rng, 5), dims(rng, 6));
    let mask: Option<Vec<bool>> = rng.gen_bool(0.7).then(|| {
        let mut m: Vec<bool> = (0..nk).map(|_| rng.gen_bool(0.6)).collect();
        let keep = rng.gen_range(0..nk);
        m[keep] = true;
        m
    });
    let mut ps = ParamStore::new();
    let q = ps.add("q", random(rng, &[nq, w], -1.0, 1.0));
    let k = ps.add("k", random(rng, &[nk, w], -1.0, 1.0));
    let v = ps.add("v", random(rng, &[nk, w], -1.0, 1.0));
    grad_error(&mut ps, |t| {
        let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
        let y = t.attention(qv, kv, vv, heads, mask.as_deref()).unwrap();
        probe(t, y)
    })
}

pub fn gather_and_concat(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c1, c2) = (dims(rng, 5), dims(rng, 4), dims(rng, 4));
    let m = dims(rng, 7);
    let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    let mut ps = ParamStore::new();
    let a = ps.add("a", random(rng, &[n, c1], -1.0, 1.0));
    let b = ps.add("b", random(rng, &[m, c2], -1.0, 1.0));
    grad_error(&mut ps, |t| {
        let (av, bv) = (t.param(a), t.param(b));
        let g = t.gather_rows(av, &idx).unwrap();
        let y = t.concat_cols(g, bv).unwrap();
        probe(t, y)
    })
}

pub fn max_pool_groups(rng: &mut ChaCha8Rng) -> f64 {
    let (groups, size, c) = (dims(rng, 4), dims(rng, 5), dims(rng, 3));
    let n = groups * size * c;
    let mut levels: Vec<usize> = (0..n).collect();
    levels.shuffle(rng);
    let data = levels.iter().map(|&l| 0.1 * l as f64 - 1.0).collect();
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::new(vec![groups * size, c], data).unwrap());
    grad_error(&mut ps, |t| {
        let xv = t.param(x);
        let y = t.max_pool_groups(xv, size).unwrap();
        probe(t, y)
    })
}

pub fn repeat_rows(rng: &mut ChaCha8Rng) -> f64 {
    let times = dims(rng, 6);
    let mut ps = ParamStore::new();
    let shape = [1, dims(rng, 5)];
    let x = ps.add("x", random(rng, &shape, -1.0, 1.0));
    grad_error(&mut ps, |t| {
        let xv = t.param(x);
        let y = t.repeat_rows(xv, times).unwrap();
        probe(t, y)
    })
}

pub fn softmax_ln_sum(rng: &mut ChaCha8Rng) -> f64 {
    let mut ps = ParamStore::new();
    let shape = [dims(rng, 4), dims(rng, 6)];
    let x = ps.add("x", random(rng, &shape, -3.0, 3.0));
    let len = dims(rng, 5);
    let p = ps.add("p", random(rng, &[len], 0.5, 2.0));
    grad_error(&mut ps, |t| {
        let xv = t.param(x);
        let s = t.softmax(xv);
        let a = probe(t, s);
        let pv = t.param(p);
        let l = t.ln(pv);
        let b = probe(t, l);
        let sb = t.sum(b);
        t.add(a, sb).unwrap()
    })
}

pub fn masked_sse(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c) = (dims(rng, 6), dims(rng, 3));
    let target: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    mask[0] = true;
    let denom = 1.0 + mask.iter().filter(|&&m| m).count() as f64;
    let mut ps = ParamStore::new();
    let x = ps.add("x", random(rng, &[n, c], -1.0, 1.0));
    grad_error(&mut ps, |t| {
        let xv = t.param(x);
        t.masked_sse(xv, &target, &mask, denom).unwrap()
    })
}

pub fn mlp_block(rng: &mut ChaCha8Rng) -> f64 {
    let d: Vec<usize> = (0..rng.gen_range(2..=4)).map(|_| dims(rng, 5)).collect();
    let mut ps = ParamStore::new();
    let mlp = Mlp::new(&mut ps, "mlp", &d, rng);
    let shape = [dims(rng, 4), d[0]];
    let x = random(rng, &shape, -1.0, 1.0);
    grad_error(&mut ps, |t| {
        let xv = t.input(x.clone());
        let y = mlp.forward(t, xv).unwrap();
        probe(t, y)
    })
}

pub fn attention_block_width_8(rng: &mut ChaCha8Rng) -> f64 {
    let heads = *[1, 2, 4, 8].choose(rng).unwrap();
    let (nq, nk) = (dims(rng, 4), dims(rng, 6));
    let mut ps = ParamStore::new();
    let block = AttentionBlock::new(&mut ps, "blk", 8, heads, rng).unwrap();
    let x = ps.add("x", random(rng, &[nq, 8], -1.0, 1.0));
    let s = ps.add("s", random(rng, &[nk, 8], -1.0, 1.0));
    let mut mask: Vec<bool> = (0..nk).map(|_| rng.gen_bool(0.7)).collect();
    mask[nk - 1] = true;
    grad_error(&mut ps, |t| {
        let (xv, sv) = (t.param(x), t.param(s));
        let y = block.forward(t, xv, sv, Some(&mask)).unwrap();
        probe(t, y)
    })
}

/// Every differentiable primitive and composite block, each checked on random configurations.
pub const OP_CASES: &[(&str, fn(&mut ChaCha8Rng) -> f64)] = &[
    ("linear", linear_with_bias),
    ("linear (no bias)", linear_without_bias),
    ("matmul", matmul),
    ("add/mul/scale", elementwise_add_mul_scale),
    ("gelu", gelu),
    ("layer_norm", layer_norm),
    ("attention", masked_multi_head_attention),
    ("gather/concat", gather_and_concat),
    ("max_pool", max_pool_groups),
    ("repeat_rows", repeat_rows),
    ("softmax/ln/sum", softmax_ln_sum),
    ("masked_sse", masked_sse),
    ("mlp", mlp_block),
    ("attention block", attention_block_width_8),
];

pub fn dims(rng: &mut impl Rng, hi: usize) -> usize {
    rng.gen_range(1..=hi)
}

/// Worst relative error of `case` over the standard configuration seeds.
pub fn worst_over_configs(case: fn(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..CONFIGS)
        .map(|seed| case(&mut ChaCha8Rng::seed_from_u64(seed)))
        .fold(0.0, f64::max)
}

/// `−ln softmax(x)[1]` for a fixed three-logit row.
pub fn softmax_cross_entropy() -> f64 {
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.8]).unwrap());
    grad_error(&mut ps, |t| {
        let xv = t.param(x);
        let s = t.softmax(xv);
        let l = t.ln(s);
        let onehot = t.input(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let picked = t.mul(l, onehot).unwrap();
        let total = t.sum(picked);
        t.scale(total, -1.0)
    })
}

/// The full encoder/decoder (with the extras branch when `seed == 2`) at a tiny random configuration.
pub fn full_model(seed: u64) -> f64 {
    let cfg = GinotConfig {
        embed_dim: 8,
        n_samples: 4,
        group_size: 3,
        radius: 0.6,
        encoder_heads: 2,
        decoder_heads: 2,
        encoder_self_layers: 1,
        decoder_cross_layers: 1,
        with_extras: seed == 2,
        ..GinotConfig::default()
    };
    let mut model = Ginot::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let cloud = PointCloud::from_points(random(&mut rng, &[12, 2], -1.0, 1.0))
        .unwrap()
        .padded(3, 0.0);
    let queries = QueryBatch::all_valid(random(&mut rng, &[5, 2], -1.0, 1.0)).unwrap();
    let extras = model
        .extension
        .as_ref()
        .map(|_| ginot::extension::ExtraInputs::new(1.3).unwrap());
    let mut ps = std::mem::take(&mut model.params);
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    grad_error(&mut ps, |t| {
        let y = model
            .forward(t, &cloud, &queries, extras, FpsInit::FixedFirstValid)
            .unwrap();
        probe(t, y)
    })
}

pub fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Random 2-D cloud with a random subset of rows marked as padding (first row always valid).
pub fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let pad_rate = if rng.gen_bool(0.5) { 0.0 } else { 0.3 };
    let mut valid: Vec<bool> = (0..n).map(|_| !rng.gen_bool(pad_rate)).collect();
    valid[0] = true;
    PointCloud::new(pts, valid).unwrap()
}

/// Textbook greedy max-min selection, recomputing distances to the selected set from scratch.
pub fn fps_oracle(pc: &PointCloud, n_samples: usize, start: usize) -> Vec<usize> {
    let valid: Vec<usize> = (0..pc.len()).filter(|&i| pc.valid()[i]).collect();
    let mut chosen = vec![start];
    while chosen.len() < n_samples.min(valid.len()) {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for &i in &valid {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| d2(pc.point(i), pc.point(c)))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    let distinct = chosen.len();
    for k in distinct..n_samples {
        chosen.push(chosen[k % distinct]);
    }
    chosen
}

/// The `k` valid points nearest to `c`, by (distance, index).
pub fn nearest_oracle(pc: &PointCloud, c: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..pc.len())
        .filter(|&i| pc.valid()[i])
        .map(|i| (d2(pc.point(i), c), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = all.iter().take(k).map(|p| p.1).collect();
    while out.len() < k {
        out.push(out[0]);
    }
    out
}

