use mspe::data::{generate_synthetic, Dataset, SyntheticShapes, SyntheticShapesSpec};
use mspe::eval::{
    eval_mode_flexivit, eval_mode_mspe, eval_mode_vanilla, sweep, EvalMetadata, EvalMode, ModelState, SweepSpec,
};
use mspe::patch_embed::{nearest_anchor, PatchKernel, PatchKernelBank};
use mspe::resize::ResizeMethod;
use mspe::train::{init_model, pretrain, TrainConfig};
use mspe::vit::{ViTConfig, ViTParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force_anchor(anchors: &[(usize, usize)], (h, w): (usize, usize)) -> usize {
    anchors
        .iter()
        .enumerate()
        .map(|(k, &(ah, aw))| {
            let d = ((ah as f64 - h as f64).powi(2) + (aw as f64 - w as f64).powi(2)).sqrt();
            (d, k)
        })
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
        .unwrap()
        .1
}

#[test]
fn kernel_selection_matches_brute_force_on_every_input() {
    // grid 32 with kernels 1..=4 puts the anchors at 32, 64, 96 and 128
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kernels = (1..=4).map(|s| PatchKernel::<f32>::random((s, s), 1, 4, &mut rng)).collect();
    let bank = PatchKernelBank::new(kernels, 32, ResizeMethod::Bilinear).unwrap();
    let anchors: Vec<_> = [32, 64, 96, 128].iter().map(|&a| (a, a)).collect();
    assert_eq!(bank.anchors(), anchors.as_slice());
    for h in 32..=160 {
        for w in 32..=160 {
            let expected = brute_force_anchor(&anchors, (h, w));
            assert_eq!(bank.select_kernel((h, w)), expected, "{h}x{w}");
            assert_eq!(nearest_anchor(&anchors, (h, w)), expected, "{h}x{w}");
        }
    }
    // squares halfway between anchors are exact ties and go to the smaller index
    assert_eq!(bank.select_kernel((48, 48)), 0);
    assert_eq!(bank.select_kernel((80, 80)), 1);
    assert_eq!(bank.select_kernel((112, 112)), 2);
}

fn tiny_model(seed: u64) -> (ViTParams<f32>, PatchKernel<f32>) {
    let config = ViTConfig {
        dim: 24,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        grid: 4,
        num_classes: 4,
    };
    init_model(config, (16, 16), 1, seed).unwrap()
}

fn shapes(per_class: usize, res: usize, seed: u64) -> SyntheticShapes {
    SyntheticShapes::generate(SyntheticShapesSpec {
        samples_per_class: per_class,
        resolution_range: (res, res),
        // larger shapes keep 16×16 renders learnable
        scale: (0.25, 0.4),
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn untrained_model_scores_at_chance() {
    let (mut params, kernel) = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    params.head_weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let ds = generate_synthetic(SyntheticShapesSpec {
        samples_per_class: 300,
        resolution_range: (16, 16),
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let r = eval_mode_vanilla(&params, &kernel, &ds, (16, 16)).unwrap();
    assert_eq!(r.count, 1200);
    let sigma = (0.25f64 * 0.75 / r.count as f64).sqrt();
    assert!((r.top1 - 0.25).abs() <= 3.0 * sigma, "accuracy {}", r.top1);
}

#[test]
fn repeated_evaluation_is_bitwise_identical() {
    let (params, kernel) = tiny_model(6);
    let bank = PatchKernelBank::from_pretrained(&kernel, 2, 4, ResizeMethod::Bilinear).unwrap();
    let one = shapes(1, 20, 7).native().take(1);
    for _ in 0..2 {
        let a = eval_mode_mspe(&params, &bank, &one).unwrap();
        let b = eval_mode_mspe(&params, &bank, &one).unwrap();
        assert_eq!(a, b);
        let a = eval_mode_vanilla(&params, &kernel, &one, (16, 16)).unwrap();
        let b = eval_mode_vanilla(&params, &kernel, &one, (16, 16)).unwrap();
        assert_eq!(a, b);
    }
}

fn trained(seed: u64) -> (ViTParams<f32>, PatchKernel<f32>) {
    let train: Dataset = shapes(250, 16, seed).native();
    let (mut params, mut kernel) = tiny_model(seed);
    let config = TrainConfig {
        epochs: 40,
        batch_size: 32,
        base_resolution: (16, 16),
        seed,
        ..TrainConfig::pretrain_defaults()
    };
    pretrain(&mut params, &mut kernel, &train.images(), &train.labels(), &config).unwrap();
    (params, kernel)
}

#[test]
fn flexivit_at_double_resolution_tracks_base_accuracy() {
    let (params, kernel) = trained(8);
    let test = shapes(150, 16, 1008).native();
    let base = eval_mode_vanilla(&params, &kernel, &test, (16, 16)).unwrap();
    assert!(base.top1 > 0.6, "pretraining too weak: {}", base.top1);
    // The doubled inputs are bilinear upsamples of the base images, the
    // relation under which a PI-resized kernel reproduces the base tokens.
    let doubled = eval_mode_flexivit(&params, &kernel, &test.resized((32, 32)).unwrap(), ResizeMethod::Bilinear).unwrap();
    // two binomial standard errors on the difference, at 3σ
    let p = base.top1;
    let noise = 3.0 * (2.0 * p * (1.0 - p) / base.count as f64).sqrt();
    assert!((doubled.top1 - base.top1).abs() <= noise, "base {} vs doubled {}", base.top1, doubled.top1);
}

#[test]
fn sweeps_follow_the_declared_grid() {
    let (params, kernel) = trained(9);
    let bank = PatchKernelBank::from_pretrained(&kernel, 2, 4, ResizeMethod::Bilinear).unwrap();
    let state = ModelState {
        kernel: &kernel,
        bank: Some(&bank),
        base_resolution: (16, 16),
        method: ResizeMethod::Bilinear,
    };
    let source = shapes(10, 16, 10);
    let meta = || EvalMetadata {
        checkpoint_id: "x".into(),
        seed: 9,
        dataset_id: "shapes".into(),
    };
    let square = SweepSpec::Square(vec![16, 32, 48, 64]).resolutions();
    let report = sweep(&params, &state, &source, &[EvalMode::Mspe], &square, meta()).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.to_csv().lines().count(), 5);

    let aspect = SweepSpec::FixedHeight {
        height: 16,
        widths: vec![8, 16, 24, 32],
    }
    .resolutions();
    let report = sweep(&params, &state, &source, &EvalMode::ALL, &aspect, meta()).unwrap();
    assert_eq!(report.rows.len(), 12);
    assert_eq!(report.failures(), 0);
    for row in &report.rows {
        let cell = row.outcome.as_ref().unwrap();
        assert!((0.0..=1.0).contains(&cell.top1));
        assert_eq!(cell.count, 40);
    }
    // at the base resolution the three modes agree exactly
    let at_base: Vec<_> = EvalMode::ALL.iter().map(|&m| report.get(m, (16, 16)).unwrap().clone()).collect();
    assert!(at_base.windows(2).all(|w| w[0] == w[1]));

    // too-small cells are recorded and the sweep continues
    let report = sweep(&params, &state, &source, &EvalMode::ALL, &[(2, 2), (16, 16)], meta()).unwrap();
    assert_eq!(report.failures(), 3);
    assert!(report.to_csv().contains(",error,error,0"));
}
