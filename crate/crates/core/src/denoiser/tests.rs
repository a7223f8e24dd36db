use super::*;
use crate::tensor::gradcheck::{check_param_gradients, random_coordinates};

fn tiny(max_len: usize, block_size: usize) -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 5,
        max_len,
        block_size,
    }
}

fn random_clean(rng: &mut SplitRng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(v - 1)).collect()
}

fn random_noisy(rng: &mut SplitRng, clean: &[usize], mask: usize) -> Vec<usize> {
    clean.iter().map(|&c| if rng.bernoulli(0.6) { mask } else { c }).collect()
}

fn finite_max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            if x.is_infinite() || y.is_infinite() {
                if x == y {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}

#[test]
fn vectorized_equals_block_loop() {
    for (l, bs) in [(4, 1), (8, 2), (8, 4), (8, 8)] {
        for seed in 0..5 {
            let mut rng = SplitRng::new(seed);
            let model = Bd3Model::new(tiny(l, bs), &mut rng).unwrap();
            let clean = random_clean(&mut rng, l, 5);
            let noisy = random_noisy(&mut rng, &clean, 4);
            let vec = model.vectorized_forward(&clean, &noisy, bs).unwrap();
            let looped = model.looped_forward(&clean, &noisy, bs).unwrap();
            let err = finite_max_diff(&vec, &looped);
            assert!(err < 1e-10, "L={l} L'={bs} seed={seed}: {err}");
        }
    }
}

#[test]
fn prefix_cache_properties() {
    let mut rng = SplitRng::new(1);
    let model = Bd3Model::new(tiny(8, 2), &mut rng).unwrap();
    assert!(model.forward_prefix(&[], 2).unwrap().is_empty());
    let x = random_clean(&mut rng, 8, 5);
    let short = model.forward_prefix(&x[..2], 2).unwrap();
    let long = model.forward_prefix(&x[..4], 2).unwrap();
    assert!(short.max_abs_diff(&long) < 1e-12);
    assert_eq!(model.forward_prefix(&x, 2).unwrap(), model.forward_prefix(&x, 2).unwrap());
    assert!(matches!(model.forward_prefix(&x[..3], 2), Err(Bd3Error::Config(_))));

    let mut inc = KvCache::new(2, 8, 2);
    for b in 0..4 {
        model.commit_block(&x[2 * b..2 * b + 2], &mut inc).unwrap();
        assert_eq!(inc.len(), 2 * (b + 1));
    }
    let fresh = model.forward_prefix(&x, 2).unwrap();
    assert!(inc.max_abs_diff(&fresh) < 1e-10);
}

#[test]
fn subs_constraints() {
    let mut rng = SplitRng::new(2);
    let model = Bd3Model::new(tiny(8, 4), &mut rng).unwrap();
    let clean = random_clean(&mut rng, 8, 5);
    let cache = model.forward_prefix(&clean[..4], 4).unwrap();
    let all_mask = model.denoise_block(&[4; 4], &cache).unwrap();
    for r in 0..4 {
        let row = all_mask.row(r);
        assert_eq!(row[4], f64::NEG_INFINITY);
        let total: f64 = row.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let unmasked = model.denoise_block(&clean[4..], &cache).unwrap();
    for r in 0..4 {
        for v in 0..5 {
            let expect = if v == clean[4 + r] { 0.0 } else { f64::NEG_INFINITY };
            assert_eq!(unmasked.row(r)[v], expect);
        }
    }
    let carry = model.vectorized_forward(&clean, &clean, 4).unwrap();
    for r in 0..8 {
        assert_eq!(carry.row(r)[clean[r]], 0.0);
    }
}

#[test]
fn last_block_clean_tokens_are_never_read() {
    let mut rng = SplitRng::new(3);
    let model = Bd3Model::new(tiny(8, 2), &mut rng).unwrap();
    let clean = random_clean(&mut rng, 8, 5);
    let noisy = vec![4; 8];
    let base = model.vectorized_forward(&clean, &noisy, 2).unwrap();
    let mut changed = clean.clone();
    changed[6] = (changed[6] + 1) % 4;
    changed[7] = (changed[7] + 2) % 4;
    assert_eq!(model.vectorized_forward(&changed, &noisy, 2).unwrap(), base);
}

fn raw_noisy_logits(model: &Bd3Model, clean: &[usize], noisy: &[usize], bs: usize) -> Vec<f64> {
    let mut g = Graph::with_params(&model.params);
    let logits = model.graph_vectorized(&mut g, clean, noisy, 1, bs).unwrap();
    g.value(logits).to_vec()
}

#[test]
fn no_information_leak_through_composite_mask() {
    let mut rng = SplitRng::new(4);
    let (l, bs, v) = (8, 2, 5);
    let model = Bd3Model::new(tiny(l, bs), &mut rng).unwrap();
    let clean = random_clean(&mut rng, l, v);
    let noisy = random_noisy(&mut rng, &clean, 4);
    let base = raw_noisy_logits(&model, &clean, &noisy, bs);
    let changed_rows = |other: &[f64]| -> Vec<usize> {
        (0..l)
            .filter(|&r| (0..v).any(|c| (base[r * v + c] - other[r * v + c]).abs() > 1e-12))
            .collect()
    };
    for b in 0..l / bs {
        let mut c2 = clean.clone();
        c2[b * bs] = (c2[b * bs] + 1) % 4;
        let rows = changed_rows(&raw_noisy_logits(&model, &c2, &noisy, bs));
        assert!(rows.iter().all(|&r| r / bs > b), "clean block {b} leaked into {rows:?}");
        if b + 1 < l / bs {
            assert!(!rows.is_empty());
        }

        let mut n2 = noisy.clone();
        n2[b * bs] = if n2[b * bs] == 4 { clean[b * bs] } else { 4 };
        let rows = changed_rows(&raw_noisy_logits(&model, &clean, &n2, bs));
        assert!(rows.iter().all(|&r| r / bs == b), "noisy block {b} leaked into {rows:?}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = SplitRng::new(5);
    let mut model = Bd3Model::new(tiny(8, 2), &mut rng).unwrap();
    let clean = random_clean(&mut rng, 8, 5);
    let noisy = random_noisy(&mut rng, &clean, 4);
    let weights: Vec<f64> = noisy.iter().map(|&t| if t == 4 { 1.3 } else { 0.0 }).collect();
    let loss_of = |m: &Bd3Model, store: &ParamStore, grads: bool| {
        let mut g = Graph::with_params(store);
        let logits = m.graph_vectorized(&mut g, &clean, &noisy, 1, 2).unwrap();
        let loss = g.masked_cross_entropy(logits, &clean, &weights).unwrap();
        let value = g.value(loss)[0];
        (value, grads.then(|| g.backward(loss).unwrap().params))
    };
    let (_, grads) = loss_of(&model, &model.params, true);
    let grads = grads.unwrap();
    let coords = random_coordinates(&model.params, 10, &mut rng);
    let frozen = model.clone();
    let report = check_param_gradients(&mut model.params, &grads, &coords, |s| Ok(loss_of(&frozen, s, false).0)).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut rng = SplitRng::new(6);
    let model = Bd3Model::new(tiny(8, 4), &mut rng).unwrap();
    model.save(&path).unwrap();
    let (loaded, meta) = Bd3Model::load(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(meta["block_size"], 4.0);
    assert_eq!(loaded.params.flatten_values(), model.params.flatten_values());
}

#[test]
fn invalid_configs() {
    let mut rng = SplitRng::new(0);
    let bad_heads = DenoiserConfig { heads: 3, ..tiny(8, 2) };
    assert!(Bd3Model::new(bad_heads, &mut rng).is_err());
    assert!(Bd3Model::new(tiny(8, 3), &mut rng).is_err());
}

#[test]
fn position_limit_is_reported() {
    let mut rng = SplitRng::new(7);
    let model = Bd3Model::new(tiny(4, 2), &mut rng).unwrap();
    let cache = model.forward_prefix(&[0, 1, 2, 3], 2).unwrap();
    assert!(matches!(model.denoise_block(&[4, 4], &cache), Err(Bd3Error::CacheAlignment(_))));
    assert!(model.denoise_block(&[4, 4, 4], &cache).is_err());
}
