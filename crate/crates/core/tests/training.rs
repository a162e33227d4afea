use mspe::checkpoint::ModelCheckpoint;
use mspe::data::{generate_synthetic, SyntheticShapesSpec};
use mspe::patch_embed::PatchKernelBank;
use mspe::resize::ResizeMethod;
use mspe::train::{
    init_model, mspe_train, pretrain, sample_resolutions, stream_rng, OptimizerState, Sgd, TrainConfig,
};
use mspe::vit::ViTConfig;
use ndarray::{Array1, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_element_subset_is_drawn_uniformly() {
    let subsets = vec![vec![(8, 8), (12, 12)]];
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let hits = (0..n)
        .filter(|_| sample_resolutions(&subsets, &mut rng).unwrap()[0] == (8, 8))
        .count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((hits - n as f64 / 2.0).abs() <= 3.0 * sigma, "{hits} of {n}");
}

#[test]
fn draws_depend_only_on_stream_position() {
    let subsets = vec![(1..=9).map(|r| (r, r)).collect::<Vec<_>>(); 3];
    let draw = |epoch, step| sample_resolutions(&subsets, &mut stream_rng(5, epoch, step)).unwrap();
    assert_eq!(draw(1, 3), draw(1, 3));
    let distinct: std::collections::HashSet<_> = (0..20).map(|s| draw(1, s)).collect();
    assert!(distinct.len() > 10);
    let across_epochs: std::collections::HashSet<_> = (1..=20).map(|e| draw(e, 0)).collect();
    assert!(across_epochs.len() > 10);
}

fn tiny_vit(grid: usize) -> ViTConfig {
    ViTConfig {
        dim: 24,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        grid,
        num_classes: 4,
    }
}

fn shapes(per_class: usize, res: usize, seed: u64) -> mspe::data::Dataset {
    generate_synthetic(SyntheticShapesSpec {
        samples_per_class: per_class,
        resolution_range: (res, res),
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn pretraining_reaches_below_chance_loss() {
    let ds = shapes(100, 16, 1);
    let (mut params, mut kernel) = init_model::<f32>(tiny_vit(4), (16, 16), 1, 1).unwrap();
    let config = TrainConfig {
        learning_rate: 0.005,
        epochs: 20,
        batch_size: 32,
        base_resolution: (16, 16),
        seed: 1,
        ..TrainConfig::pretrain_defaults()
    };
    let history = pretrain(&mut params, &mut kernel, &ds.images(), &ds.labels(), &config).unwrap();
    let losses = history.epoch_means("loss");
    assert_eq!(losses.len(), 20);
    let last = *losses.last().unwrap();
    assert!(last < 4f64.ln(), "final training loss {last} vs ln 4");
    assert!(history.records.iter().all(|r| r.value.is_finite()));
}

#[test]
fn mspe_fine_tuning_lowers_loss_and_leaves_encoder_bitwise_intact() {
    let ds = shapes(60, 16, 2);
    let (mut params, mut kernel) = init_model::<f32>(tiny_vit(4), (16, 16), 1, 2).unwrap();
    let pre = TrainConfig {
        epochs: 8,
        batch_size: 32,
        base_resolution: (16, 16),
        seed: 2,
        ..TrainConfig::pretrain_defaults()
    };
    pretrain(&mut params, &mut kernel, &ds.images(), &ds.labels(), &pre).unwrap();

    // round trip through a checkpoint file, as the command line does
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    ModelCheckpoint {
        params: params.clone(),
        kernel: kernel.clone(),
        bank: None,
        base_resolution: (16, 16),
    }
    .save(&path)
    .unwrap();
    let loaded = ModelCheckpoint::<f32>::load(&path).unwrap();
    let before: Vec<(String, Vec<u32>)> = loaded
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().map(|v| v.to_bits()).collect()))
        .collect();

    let config = TrainConfig {
        learning_rate: 0.005,
        epochs: 5,
        batch_size: 32,
        kernels: 2,
        resolutions: vec![(8, 8), (12, 12), (16, 16), (20, 20)],
        base_resolution: (16, 16),
        seed: 2,
        ..Default::default()
    };
    let mut bank = PatchKernelBank::from_pretrained(&loaded.kernel, 2, 4, ResizeMethod::Bilinear).unwrap();
    let initial_bank = bank.clone();
    let history = mspe_train(&loaded.params, &mut bank, &ds.images(), &ds.labels(), &config, None).unwrap();
    let totals = history.epoch_means("total");
    assert_eq!(totals.len(), 5);
    assert!(totals[4] < totals[0], "epoch means {totals:?}");
    assert_ne!(bank, initial_bank);

    let after: Vec<(String, Vec<u32>)> = loaded
        .params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert_eq!(before, after);
    let reread = ModelCheckpoint::<f32>::load(&path).unwrap();
    assert_eq!(reread.params, loaded.params);
}

#[test]
fn fixed_seed_reproduces_loss_history() {
    let ds = shapes(10, 16, 3);
    let (params, kernel) = init_model::<f32>(tiny_vit(4), (16, 16), 1, 3).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        kernels: 2,
        resolutions: vec![(8, 8), (12, 12), (16, 16), (20, 20)],
        base_resolution: (16, 16),
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let mut bank = PatchKernelBank::from_pretrained(&kernel, 2, 4, ResizeMethod::Bilinear).unwrap();
        let h = mspe_train(&params, &mut bank, &ds.images(), &ds.labels(), &config, None).unwrap();
        (h.to_csv(), bank)
    };
    let (a, bank_a) = run();
    let (b, bank_b) = run();
    assert_eq!(a, b);
    assert_eq!(bank_a, bank_b);
}

proptest! {
    #[test]
    fn subsets_partition_sorted_resolutions(
        sides in prop::collection::btree_set(1usize..64, 1..20), k in 1usize..8
    ) {
        let resolutions: Vec<_> = sides.iter().rev().map(|&s| (s, s)).collect();
        let config = TrainConfig { kernels: k.min(resolutions.len()), resolutions: resolutions.clone(), ..Default::default() };
        let subsets = config.subsets().unwrap();
        prop_assert_eq!(subsets.len(), config.kernels);
        let flat: Vec<_> = subsets.iter().flatten().cloned().collect();
        let mut sorted = resolutions.clone();
        sorted.sort();
        prop_assert_eq!(flat, sorted);
        let sizes: Vec<usize> = subsets.iter().map(|s| s.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sgd_matches_scalar_recurrence(
        p0 in -1.0f64..1.0, grads in prop::collection::vec(-1.0f64..1.0, 1..6),
        lr in 0.0f64..0.1, mu in 0.0f64..0.99, wd in 0.0f64..0.01
    ) {
        let sgd = Sgd { learning_rate: lr, momentum: mu, weight_decay: wd };
        let mut state = OptimizerState::<f64>::new();
        let mut w = ArrayD::from_elem(IxDyn(&[1]), p0);
        let mut b = Array1::from_elem(1, p0).into_dyn();
        let (mut pw, mut vw, mut pb, mut vb) = (p0, 0.0, p0, 0.0);
        for &g in &grads {
            let ga = ArrayD::from_elem(IxDyn(&[1]), g);
            state.step(
                &sgd,
                vec![("k.weight".into(), w.view_mut()), ("k.bias".into(), b.view_mut())],
                &[ga.view(), ga.view()],
            ).unwrap();
            vw = mu * vw + (g + wd * pw);
            pw -= lr * vw;
            vb = mu * vb + g;
            pb -= lr * vb;
        }
        prop_assert!((w[[0]] - pw).abs() < 1e-12);
        prop_assert!((b[[0]] - pb).abs() < 1e-12);
    }
}
