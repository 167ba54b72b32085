use super::*;
use crate::adapter::AdapterConfig;
use crate::data::testing::{tiny_dataset, tiny_schema};
use crate::data::FeatureValue;
use crate::models::ModelKind;
use crate::tensor::{finite_difference_check, GradCheckOptions};
use rand::Rng;

struct Fixture {
    net: Network,
    store: ParamStore,
    data: Dataset,
    stats: StatsStore,
}

fn spec(kind: ModelKind, use_adapter: bool) -> NetworkSpec {
    NetworkSpec {
        model: ModelConfig {
            kind,
            hidden: vec![8, 4, 1],
            tower: vec![6],
            latent: 4,
        },
        adapter: AdapterConfig {
            hidden: 5,
            ..AdapterConfig::default()
        },
        use_adapter,
        channels: vec![CountChannel::Impression, CountChannel::Comment, CountChannel::Like],
    }
}

fn fixture(kind: ModelKind, use_adapter: bool, seed: u64) -> Fixture {
    let data = tiny_dataset(40);
    let stats = StatsStore::build(&data, false);
    let (net, store) = Network::init(&tiny_schema(3), &spec(kind, use_adapter), seed).unwrap();
    Fixture { net, store, data, stats }
}

/// Moves every parameter off its initial value so zero-initialized layers
/// carry signal.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = crate::seed::stream(seed, "jitter");
    let ids: Vec<ParamId> = store.ids().collect();
    for pid in ids {
        for v in store.value_mut(pid).as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn refs(data: &Dataset, n: usize) -> Vec<&Sample> {
    data.samples.iter().take(n).collect()
}

fn cfg(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        ablation,
        ..TrainConfig::default()
    }
}

fn sigmoid_ce(z: f64, y: f64) -> f64 {
    let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn value(store: &ParamStore, name: &str) -> Matrix {
    store.value(store.lookup(name).unwrap()).clone()
}

fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|o| (0..w.cols()).map(|c| w.get(o, c) * x[c]).sum::<f64>() + b.get(0, o))
        .collect()
}

/// Plain-arithmetic re-evaluation of `main + alpha · aux` for the FM model
/// with a joint state adapter, given the masking pattern of one variant.
fn oracle_fm_total(f: &Fixture, samples: &[&Sample], masked: &[Vec<bool>], alpha: f64) -> f64 {
    let store = &f.store;
    let schema = &f.net.schema;
    let d = schema.dim;
    let bounds = [0u32, 1, 2, 3, 5, 10, 20, 30];
    let w0 = value(store, "adapter.0.weight");
    let b0 = value(store, "adapter.0.bias");
    let w1 = value(store, "adapter.1.weight");
    let b1 = value(store, "adapter.1.bias");
    let fm_bias = value(store, "fm.bias").get(0, 0);
    let kinds: Vec<FeatureKind> = schema.features().iter().map(|s| s.kind).collect();
    let fm = |emb: &[Vec<f64>]| {
        let mut pools = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        for (v, k) in emb.iter().zip(&kinds) {
            let p = match k {
                FeatureKind::User => 0,
                FeatureKind::Item => 1,
                FeatureKind::Context => 2,
            };
            for c in 0..d {
                pools[p][c] += v[c];
            }
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&pools[0], &pools[1]) + dot(&pools[0], &pools[2]) + dot(&pools[1], &pools[2]) + fm_bias
    };
    let one_hot_log2 = |c: u64, out: &mut Vec<f64>| {
        let mut slot = vec![0.0; 21];
        if c > 0 {
            let mut k = 0;
            while k < 20 && (1u64 << (k + 1)) <= c {
                k += 1;
            }
            slot[k] = 1.0;
        }
        out.extend(slot);
    };

    let (mut main, mut aux) = (0.0, 0.0);
    for (r, s) in samples.iter().enumerate() {
        let emb: Vec<Vec<f64>> = (0..schema.len())
            .map(|i| {
                let table = value(store, &format!("embedding.{}", schema.feature(i).name));
                match &s.features[i] {
                    FeatureValue::Id(v) => table.row(*v as usize).to_vec(),
                    FeatureValue::Seq(vs) => {
                        let mut m = vec![0.0; d];
                        for &v in vs {
                            for c in 0..d {
                                m[c] += table.get(v as usize, c) / vs.len() as f64;
                            }
                        }
                        m
                    }
                }
            })
            .collect();

        let mut x = Vec::new();
        let mut act = vec![0.0; 16];
        if let Some(a) = f.stats.user_activity(s.user, s.timestamp) {
            let bucket = |days: u32| bounds.iter().filter(|&&b| b <= days).count() - 1;
            act[bucket(a.active_7)] = 1.0;
            act[8 + bucket(a.active_30)] = 1.0;
        }
        x.extend(act);
        for i in [0, 2] {
            x.extend(&emb[i]);
        }
        for i in [0, 2] {
            let n = emb[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            x.extend([n, (1.0 + n).ln(), n.sqrt(), n * n]);
        }
        for counts in [f.stats.user_counts(s.user), f.stats.item_counts(s.item)] {
            for ch in 0..3 {
                one_hot_log2(counts.map_or(0, |c| c[ch]), &mut x);
            }
        }
        let h: Vec<f64> = affine(&w0, &b0, &x).into_iter().map(|v| v.max(0.0)).collect();
        let w: Vec<f64> = affine(&w1, &b1, &h).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();

        let weighted: Vec<Vec<f64>> = emb.iter().zip(&w).map(|(v, wi)| v.iter().map(|x| wi * x).collect()).collect();
        main += sigmoid_ce(fm(&weighted), s.label_f64());

        let masked_emb: Vec<Vec<f64>> = (0..schema.len())
            .map(|i| {
                if masked[i][r] {
                    value(store, &format!("mask.{}", schema.feature(i).name)).row(0).to_vec()
                } else {
                    emb[i].clone()
                }
            })
            .collect();
        aux += sigmoid_ce(fm(&masked_emb), s.label_f64());
    }
    let b = samples.len() as f64;
    main / b + alpha * aux / b
}

use crate::schema::FeatureKind;

#[test]
fn full_loss_matches_independent_oracle() {
    let mut f = fixture(ModelKind::Fm, true, 3);
    jitter(&mut f.store, 1);
    let batch = refs(&f.data, 8);
    let mask = MaskConfig::default();
    let g = loss_graph(&f.net, &f.store, &batch, &f.stats, &mask, &cfg(Ablation::Full), 17, true).unwrap();
    assert_eq!(g.masked.len(), 1);
    let oracle = oracle_fm_total(&f, &batch, &g.masked[0].masked, 0.2);
    let b = g.breakdown(0.2);
    assert!((b.total - oracle).abs() < 1e-10, "{} vs {oracle}", b.total);
    assert!((b.total - (b.main + 0.2 * b.aux)).abs() < 1e-12);
    assert!(b.main >= 0.0 && b.aux >= 0.0);
}

#[test]
fn degenerate_config_gives_ln2() {
    let mut f = fixture(ModelKind::Fm, true, 0);
    for pid in f.store.ids().collect::<Vec<_>>() {
        f.store.value_mut(pid).fill(0.0);
    }
    f.net.adapter.as_mut().unwrap().force_weights(Some(vec![1.0; 5])).unwrap();
    let mut s = f.data.samples[0].clone();
    s.label = 1;
    let mask = MaskConfig { k: 0, ..MaskConfig::default() };
    let g = loss_graph(&f.net, &f.store, &[&s], &f.stats, &mask, &cfg(Ablation::Full), 0, false).unwrap();
    let b = g.breakdown(0.2);
    let ln2 = std::f64::consts::LN_2;
    assert!((b.main - ln2).abs() < 1e-15);
    assert_eq!(b.aux, 0.0);
    assert_eq!(b.total, b.main);
}

#[test]
fn zero_alpha_ignores_aux() {
    let mut f = fixture(ModelKind::Mlp, true, 1);
    jitter(&mut f.store, 2);
    let train = TrainConfig {
        alpha: 0.0,
        ..cfg(Ablation::Full)
    };
    let g = loss_graph(&f.net, &f.store, &refs(&f.data, 8), &f.stats, &MaskConfig::default(), &train, 5, false).unwrap();
    let b = g.breakdown(0.0);
    assert!(b.aux > 0.0);
    assert_eq!(b.total, b.main);
}

#[test]
fn k_zero_total_is_main() {
    let mut f = fixture(ModelKind::Fm, true, 1);
    jitter(&mut f.store, 3);
    let mask = MaskConfig { k: 0, ..MaskConfig::default() };
    let g = loss_graph(&f.net, &f.store, &refs(&f.data, 8), &f.stats, &mask, &cfg(Ablation::Full), 5, false).unwrap();
    assert!(g.aux.is_none());
    assert_eq!(g.tape.scalar(g.total), g.tape.scalar(g.main));
}

#[test]
fn masked_forwards_never_read_weights() {
    for kind in [ModelKind::Mlp, ModelKind::Fm, ModelKind::TwoTower] {
        let f = fixture(kind, true, 2);
        let mask = MaskConfig { k: 3, ..MaskConfig::default() };
        let g = loss_graph(&f.net, &f.store, &refs(&f.data, 8), &f.stats, &mask, &cfg(Ablation::Full), 5, false).unwrap();
        assert_eq!(g.aux_logits.len(), 3);
        assert_eq!(g.weight_reads_during_aux, 0);
        assert_eq!(g.weights.as_ref().unwrap().read_count(), 1);
    }
}

#[test]
fn unmasked_aux_forward_ignores_forced_weights() {
    let mut f = fixture(ModelKind::Mlp, true, 4);
    jitter(&mut f.store, 4);
    f.net.adapter.as_mut().unwrap().force_weights(Some(vec![0.3, 2.0, 0.7, 0.1, 1.5])).unwrap();
    let batch = refs(&f.data, 6);
    let never = MaskConfig { k: 1, beta: 0.0, gamma: 0.0 };
    let g = loss_graph(&f.net, &f.store, &batch, &f.stats, &never, &cfg(Ablation::Full), 1, false).unwrap();
    let base = loss_graph(&f.net, &f.store, &batch, &f.stats, &never, &cfg(Ablation::BaseOnly), 1, false).unwrap();
    assert_eq!(g.tape.value(g.aux_logits[0]), base.tape.value(base.main_logits));
    assert_ne!(g.tape.value(g.main_logits), base.tape.value(base.main_logits));
}

#[test]
fn masked_forward_shares_base_parameters() {
    let mut f = fixture(ModelKind::Mlp, false, 4);
    jitter(&mut f.store, 5);
    let batch = refs(&f.data, 6);
    let mask = MaskConfig { k: 1, beta: 0.5, gamma: 0.5 };
    let g = loss_graph(&f.net, &f.store, &batch, &f.stats, &mask, &cfg(Ablation::MaskOnly), 1, false).unwrap();
    let w = f.store.lookup("mlp.0.weight").unwrap();
    let grads_of = |out: NodeId, store: &mut ParamStore| {
        store.zero_grad();
        g.tape.backward(out, store).unwrap();
        store.grad(w).clone()
    };
    let from_main = grads_of(g.main, &mut f.store);
    let from_aux = grads_of(g.aux.unwrap(), &mut f.store);
    assert!(from_main.max_abs() > 0.0 && from_aux.max_abs() > 0.0);
}

#[test]
fn serving_matches_training_forward() {
    for kind in [ModelKind::Mlp, ModelKind::Fm, ModelKind::TwoTower] {
        let mut f = fixture(kind, true, 6);
        jitter(&mut f.store, 6);
        let batch = refs(&f.data, 8);
        let g = loss_graph(&f.net, &f.store, &batch, &f.stats, &MaskConfig::default(), &cfg(Ablation::Full), 3, false).unwrap();
        let train_probs: Vec<f64> = g.tape.value(g.main_logits).as_slice().iter().map(|&z| sigmoid(z)).collect();
        let before = f.net.forward_rows();
        let served = serve_predict(&f.net, &f.store, &batch, &f.stats).unwrap();
        assert_eq!(f.net.forward_rows() - before, batch.len() as u64);
        for (a, b) in served.iter().zip(&train_probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cached_item_vectors_reproduce_serving() {
    let mut f = fixture(ModelKind::TwoTower, true, 8);
    jitter(&mut f.store, 8);
    let all = refs(&f.data, 40);
    let cache = build_item_cache(&f.net, &f.store, &all, &f.stats).unwrap();
    let direct = serve_predict(&f.net, &f.store, &all, &f.stats).unwrap();
    let cached = serve_with_cache(&f.net, &f.store, &cache, &all, &f.stats).unwrap();
    assert_eq!(direct, cached);
}

#[test]
fn uninitialized_parameters_cannot_serve() {
    let mut f = fixture(ModelKind::Fm, false, 0);
    let pid = f.store.lookup("fm.bias").unwrap();
    f.store.value_mut(pid).fill(f64::NAN);
    assert!(serve_predict(&f.net, &f.store, &refs(&f.data, 2), &f.stats).is_err());
}

#[test]
fn non_finite_loss_names_the_tensor() {
    let mut f = fixture(ModelKind::Fm, false, 0);
    let pid = f.store.lookup("fm.bias").unwrap();
    f.store.value_mut(pid).fill(f64::NAN);
    let mut opt = Adam::new(&f.store, 0.01);
    let err = train_step(&f.net, &mut f.store, &mut opt, &refs(&f.data, 4), &f.stats, &MaskConfig::default(), &cfg(Ablation::BaseOnly), 0, 0)
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { op, .. } if op != "total"), "{err}");
}

#[test]
fn every_parameter_group_gets_gradient() {
    let mut f = fixture(ModelKind::Fm, true, 9);
    let batch = refs(&f.data, 40);
    let g = loss_graph(&f.net, &f.store, &batch, &f.stats, &MaskConfig { k: 2, ..MaskConfig::default() }, &cfg(Ablation::Full), 2, false).unwrap();
    f.store.zero_grad();
    g.tape.backward(g.total, &mut f.store).unwrap();
    for (name, ids) in f.net.param_groups() {
        assert!(!ids.is_empty(), "{name}");
        assert!(ids.iter().any(|&p| f.store.grad(p).max_abs() > 0.0), "group {name} has no gradient");
    }
}

#[test]
fn masked_positions_feed_only_mask_rows() {
    let mut f = fixture(ModelKind::Fm, false, 10);
    let s = f.data.samples[0].clone();
    let all = MaskConfig { k: 1, beta: 1.0, gamma: 1.0 };
    let g = loss_graph(&f.net, &f.store, &[&s], &f.stats, &all, &cfg(Ablation::MaskOnly), 0, false).unwrap();
    f.store.zero_grad();
    g.tape.backward(g.aux.unwrap(), &mut f.store).unwrap();
    for i in 0..f.net.tables.len() {
        assert_eq!(f.store.grad(f.net.tables.table(i)).max_abs(), 0.0);
        assert!(f.store.grad(f.net.tables.mask_param(i).unwrap()).max_abs() > 0.0);
    }
}

#[test]
fn mask_row_changes_iff_feature_was_masked() {
    let mut f = fixture(ModelKind::Fm, false, 11);
    let batch = refs(&f.data, 4);
    let mask = MaskConfig { k: 1, beta: 0.5, gamma: 0.5 };
    let train = cfg(Ablation::MaskOnly);
    let seed_for_step = crate::seed::derive_indexed(0, "mask", 0);
    let g = loss_graph(&f.net, &f.store, &batch, &f.stats, &mask, &train, seed_for_step, false).unwrap();
    let masked: Vec<bool> = g.masked[0].masked.iter().map(|rows| rows.iter().any(|&m| m)).collect();
    assert!(masked.iter().any(|&m| m) && masked.iter().any(|&m| !m));
    let before: Vec<Matrix> = (0..5).map(|i| f.store.value(f.net.tables.mask_param(i).unwrap()).clone()).collect();
    let mut opt = Adam::new(&f.store, 0.01);
    train_step(&f.net, &mut f.store, &mut opt, &batch, &f.stats, &mask, &train, 0, 0).unwrap();
    for (i, was) in masked.into_iter().enumerate() {
        let changed = f.store.value(f.net.tables.mask_param(i).unwrap()) != &before[i];
        assert_eq!(changed, was, "feature {i}");
    }
}

#[test]
fn scaling_layer_gradient_identity() {
    for seed in 0..10 {
        let mut f = fixture(ModelKind::Mlp, true, seed);
        jitter(&mut f.store, seed);
        f.net.adapter.as_mut().unwrap().config.stop_gradient = true;
        let mask = MaskConfig { k: 0, ..MaskConfig::default() };
        let g = loss_graph(&f.net, &f.store, &refs(&f.data, 8), &f.stats, &mask, &cfg(Ablation::AdapterOnly), 0, false).unwrap();
        let grads = g.tape.backward(g.total, &mut f.store).unwrap();
        let weighted = g.weighted.as_ref().unwrap();
        let w = g.weights.as_ref().unwrap().values(&g.tape);
        for i in 0..weighted.len() {
            let (gv, ga) = (grads.get(g.embeddings.vectors[i]).unwrap(), grads.get(weighted.vectors[i]).unwrap());
            for r in 0..gv.rows() {
                for c in 0..gv.cols() {
                    assert!((gv.get(r, c) - w.get(r, i) * ga.get(r, c)).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_weights_silence_embedding_gradients() {
    let mut f = fixture(ModelKind::Mlp, true, 2);
    jitter(&mut f.store, 2);
    f.net.adapter.as_mut().unwrap().force_weights(Some(vec![0.0; 5])).unwrap();
    let mask = MaskConfig { k: 0, ..MaskConfig::default() };
    let g = loss_graph(&f.net, &f.store, &refs(&f.data, 8), &f.stats, &mask, &cfg(Ablation::Full), 0, false).unwrap();
    let weighted = g.weighted.as_ref().unwrap();
    assert!(weighted.vectors.iter().all(|&v| g.tape.value(v).max_abs() == 0.0));
    f.store.zero_grad();
    g.tape.backward(g.total, &mut f.store).unwrap();
    for i in 0..5 {
        assert_eq!(f.store.grad(f.net.tables.table(i)).max_abs(), 0.0);
    }
}

#[test]
fn end_to_end_gradients_check_out() {
    for kind in [ModelKind::Mlp, ModelKind::Fm, ModelKind::TwoTower] {
        for ablation in Ablation::ALL {
            let mut f = fixture(kind, ablation.uses_adapter(), 12);
            jitter(&mut f.store, 12);
            let batch = refs(&f.data, 8);
            let train = cfg(ablation);
            let mask = MaskConfig::default();
            let (net, stats) = (&f.net, &f.stats);
            let params: Vec<ParamId> = f.store.ids().collect();
            let report = finite_difference_check(
                &mut f.store,
                &params,
                |s| {
                    let g = loss_graph(net, s, &batch, stats, &mask, &train, 21, false)?;
                    Ok((g.tape, g.total))
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passes(1e-4), "{kind:?}/{ablation:?}: {report:?}");
        }
    }
}

#[test]
fn self_weight_baseline_path_checks_out() {
    let data = tiny_dataset(40);
    let stats = StatsStore::build(&data, false);
    let mut s = spec(ModelKind::Fm, true);
    s.adapter.source = crate::adapter::WeightSource::SelfWeight;
    let (net, mut store) = Network::init(&tiny_schema(3), &s, 4).unwrap();
    let batch = refs(&data, 8);
    let train = cfg(Ablation::Full);
    let mask = MaskConfig::default();

    let g = loss_graph(&net, &store, &batch, &stats, &mask, &train, 0, false).unwrap();
    assert!(g.weights.as_ref().unwrap().values(&g.tape).as_slice().iter().all(|&w| w == 0.5));

    jitter(&mut store, 4);
    let swapped = [batch[1], batch[0]];
    let w = |samples: &[&Sample], store: &ParamStore| sample_weights(&net, store, samples, &stats).unwrap().unwrap();
    let (a, b) = (w(&batch[..2], &store), w(&swapped, &store));
    assert_eq!(a[0], b[1]);
    assert_eq!(a[1], b[0]);

    let params: Vec<ParamId> = store.ids().collect();
    let report = finite_difference_check(
        &mut store,
        &params,
        |s| {
            let g = loss_graph(&net, s, &batch, &stats, &mask, &train, 3, false)?;
            Ok((g.tape, g.total))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn base_only_matches_hand_built_step() {
    let f = fixture(ModelKind::Fm, false, 13);
    let batch = refs(&f.data, 16);
    let mut store_a = f.store.clone();
    let mut store_b = f.store.clone();
    let mut opt_a = Adam::new(&store_a, 0.01);
    let mut opt_b = Adam::new(&store_b, 0.01);
    let train = cfg(Ablation::BaseOnly);
    for step in 0..3 {
        let b = train_step(&f.net, &mut store_a, &mut opt_a, &batch, &f.stats, &MaskConfig::default(), &train, 0, step).unwrap();

        let mut tape = Tape::new();
        let set = lookup(&mut tape, &store_b, &f.net.schema, &f.net.tables, &batch).unwrap();
        let z = f.net.base.logits(&mut tape, &store_b, &set).unwrap();
        let labels: Vec<f64> = batch.iter().map(|s| s.label_f64()).collect();
        let loss = tape.cross_entropy_with_logits(z, &labels, 1.0 / batch.len() as f64).unwrap();
        store_b.zero_grad();
        tape.backward(loss, &mut store_b).unwrap();
        opt_b.step(&mut store_b).unwrap();

        assert_eq!(b.main, tape.scalar(loss));
        assert_eq!(b.aux, 0.0);
    }
    for pid in store_a.ids() {
        assert_eq!(store_a.value(pid), store_b.value(pid));
    }
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    let p = store.register("p", Matrix::row_vector(vec![1.0, -2.0, 0.5])).unwrap();
    let mut opt = Adam::new(&store, 0.1);
    opt.step(&mut store).unwrap();
    assert_eq!(store.value(p).as_slice(), &[1.0, -2.0, 0.5]);

    let mut opt = Adam::new(&store, 0.1);
    store.grad_mut(p).as_mut_slice().copy_from_slice(&[3.0, -0.01, 0.0]);
    opt.step(&mut store).unwrap();
    let v = store.value(p).as_slice();
    // bias-corrected first step moves each coordinate by about lr against its gradient
    assert!((v[0] - 0.9).abs() < 1e-6);
    assert!((v[1] - (-1.9)).abs() < 1e-5);
    assert_eq!(v[2], 0.5);

    let (m_before, v_before) = (opt.moments(p).0.clone(), opt.moments(p).1.clone());
    store.zero_grad();
    opt.step(&mut store).unwrap();
    let (m, vv) = opt.moments(p);
    for j in 0..3 {
        assert_eq!(m.as_slice()[j], 0.9 * m_before.as_slice()[j]);
        assert_eq!(vv.as_slice()[j], 0.999 * v_before.as_slice()[j]);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let run = || {
        let mut f = fixture(ModelKind::Fm, true, 14);
        let mut opt = Adam::new(&f.store, 0.01);
        let all: Vec<&Sample> = f.data.samples.iter().collect();
        for step in 0..100u64 {
            let lo = (step as usize * 8) % 32;
            train_step(&f.net, &mut f.store, &mut opt, &all[lo..lo + 8], &f.stats, &MaskConfig::default(), &cfg(Ablation::Full), 5, step).unwrap();
        }
        f.store
    };
    let (a, b) = (run(), run());
    for pid in a.ids() {
        assert_eq!(a.value(pid), b.value(pid));
    }
}

#[test]
fn best_epoch_is_the_argmax() {
    assert_eq!(select_best(&[Some(0.6), Some(0.7), Some(0.65)]), 1);
    assert_eq!(select_best(&[None, Some(0.5)]), 1);
    assert_eq!(select_best(&[Some(0.7), Some(0.7)]), 0);
    assert_eq!(select_best(&[None, None]), 0);
}

fn learnable(n: usize, seed: u64) -> Dataset {
    // label = 1 exactly when the user and item share parity
    let mut rng = crate::seed::stream(seed, "learnable");
    let samples = (0..n)
        .map(|_| {
            let (u, i) = (rng.random_range(1..6u32), rng.random_range(1..8u32));
            let mut s = crate::data::testing::tiny_sample(u, i, u8::from(u % 2 == i % 2));
            s.comment = false;
            s
        })
        .collect();
    Dataset::new(tiny_schema(3), samples, crate::data::Split::Train, spec(ModelKind::Fm, true).channels).unwrap()
}

#[test]
fn fit_smoke_logs_one_auc_per_epoch() {
    let data = learnable(100, 1);
    let stats = StatsStore::build(&data, false);
    let (net, mut store) = Network::init(&data.schema, &spec(ModelKind::Fm, true), 0).unwrap();
    let train = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = fit(&net, &mut store, &data, &learnable(50, 2), &stats, &MaskConfig::default(), &train, 0).unwrap();
    assert_eq!(out.log.iter().filter(|r| r.val_auc.is_some()).count(), 1);
    assert_eq!(out.best_epoch, 0);
    let empty = Dataset::new(data.schema.clone(), vec![], crate::data::Split::Train, vec![]).unwrap();
    assert!(fit(&net, &mut store, &empty, &data, &stats, &MaskConfig::default(), &train, 0).is_err());
}

#[test]
fn loss_decreases_on_a_learnable_rule() {
    let data = learnable(600, 3);
    let stats = StatsStore::build(&data, false);
    let (net, mut store) = Network::init(&data.schema, &spec(ModelKind::Mlp, true), 1).unwrap();
    let train = TrainConfig {
        epochs: 3,
        batch_size: 32,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let out = fit(&net, &mut store, &data, &learnable(200, 4), &stats, &MaskConfig::default(), &train, 1).unwrap();
    let totals: Vec<f64> = out.epoch_losses.iter().map(|l| l.total).collect();
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    assert_eq!(out.best_epoch, select_best(&out.val_aucs));
}
