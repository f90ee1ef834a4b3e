use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicegap_core::interp::{IdentityCodec, UpsampleOptions};
use slicegap_core::metrics::psnr;
use slicegap_core::sr::*;
use slicegap_core::synth::{make_phantom, PhantomSpec};
use slicegap_core::volume::{degrade, trilinear_upsample};
use slicegap_core::{Error, Spacing, Volume3D};
use slicegap_nn::gradcheck::check_directions;
use slicegap_nn::{Graph, ParamSet};

fn phantom(seed: u64, size: (usize, usize, usize)) -> Volume3D {
    make_phantom(&PhantomSpec {
        size,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        num_res_blocks: 2,
        channels: 4,
        ..Default::default()
    }
}

fn small_train(iterations: usize) -> SrTrainConfig {
    SrTrainConfig {
        iterations,
        batch_size: 2,
        patch: (5, 8, 8),
        ..Default::default()
    }
}

#[test]
fn zero_output_layer_reproduces_trilinear() {
    let hr = phantom(1, (9, 16, 16));
    let lr = degrade(&hr, 4, 0).unwrap();
    let mut state = SrState::new(small_spec(), small_train(1), 4, 7).unwrap();
    let out = sr_infer(&state, &lr, 4).unwrap();
    let tri = trilinear_upsample(&lr, 4).unwrap();
    assert_eq!(out.data(), tri.data());
    assert_eq!(out.spacing(), tri.spacing());
    assert_eq!(out.meta()["upsample_k"], "4");

    // a trained tail stops being the identity, zeroing it restores it
    state
        .train_until(&pairs_from_hr(&[hr], 4).unwrap(), Some(3), &mut |_| Ok(()))
        .unwrap();
    assert_ne!(sr_infer(&state, &lr, 4).unwrap().data(), tri.data());
    state.zero_output_layer();
    assert_eq!(sr_infer(&state, &lr, 4).unwrap().data(), tri.data());
}

#[test]
fn ratio_mismatch_is_rejected() {
    let lr = degrade(&phantom(2, (9, 8, 8)), 2, 0).unwrap();
    let state = SrState::new(small_spec(), small_train(1), 4, 7).unwrap();
    assert!(matches!(
        sr_infer(&state, &lr, 2),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        SrState::new(small_spec(), small_train(1), 1, 7),
        Err(Error::Config(_))
    ));
    let even = GeneratorSpec {
        kernel: (3, 2, 3),
        ..small_spec()
    };
    assert!(matches!(
        SrState::new(even, small_train(1), 4, 7),
        Err(Error::Config(_))
    ));
}

#[test]
fn supervised_pairs_are_degraded_then_interpolated() {
    let hr = phantom(3, (9, 8, 8));
    let pairs = pairs_from_hr(std::slice::from_ref(&hr), 4).unwrap();
    assert_eq!(&pairs[0].target, hr.data());
    // observed planes pass through, in-between ones are linear blends of them
    let x = hr.data();
    for z in 0..9 {
        let (n, t) = (z / 4, (z % 4) as f64 / 4.0);
        let next = if z % 4 == 0 { n } else { n + 1 };
        let want = x.slice(s![4 * n, .., ..]).mapv(|v| v * (1.0 - t))
            + x.slice(s![4 * next, .., ..]).mapv(|v| v * t);
        let got = pairs[0].input.slice(s![z, .., ..]);
        assert!(
            got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12),
            "plane {z}"
        );
    }
    assert!(matches!(
        pairs_from_hr(&[phantom(3, (8, 8, 8))], 4),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn identity_codec_synthesis_gives_interpolated_targets() {
    let lr = degrade(&phantom(4, (9, 8, 8)), 4, 0).unwrap();
    let codec = IdentityCodec {
        height: 8,
        width: 8,
    };
    let pairs = pairs_from_lr(
        &codec,
        std::slice::from_ref(&lr),
        4,
        UpsampleOptions::default(),
    )
    .unwrap();
    let tri = trilinear_upsample(&lr, 4).unwrap();
    assert_eq!(&pairs[0].target, tri.data());
    assert_eq!(&pairs[0].input, tri.data());
}

#[test]
fn l1_gradients_match_finite_differences() {
    let spec = GeneratorSpec {
        num_res_blocks: 2,
        channels: 2,
        zero_init_tail: false,
        residual_scaling: 0.7,
        ..Default::default()
    };
    let state = SrState::new(spec, small_train(1), 2, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs: Vec<Array3<f64>> = (0..2)
        .map(|_| Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>()))
        .collect();
    let ys: Vec<Array3<f64>> = (0..2)
        .map(|_| Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>()))
        .collect();
    let report = check_directions(
        &state.params,
        |g: &mut Graph, p: &ParamSet| {
            let mut s = state.clone();
            s.params = p.clone();
            let b = s.params.bind(g);
            (s.l1_graph(g, &b, &xs, &ys), b)
        },
        20,
        1e-5,
        &mut rng,
    );
    assert!(report.passes(1e-4, 20), "{report:?}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let pairs = pairs_from_hr(&[phantom(5, (9, 12, 12)), phantom(6, (9, 12, 12))], 4).unwrap();
    let cfg = SrTrainConfig {
        checkpoint_every: 3,
        ..small_train(6)
    };
    let fresh = || SrState::new(small_spec(), cfg.clone(), 4, 21).unwrap();

    let mut a = fresh();
    let mut saved = None;
    a.train_until(&pairs, None, &mut |s| {
        if s.iteration == 3 {
            saved = Some(serde_json::to_string(s).unwrap());
        }
        Ok(())
    })
    .unwrap();
    let mut b = fresh();
    b.train_until(&pairs, None, &mut |_| Ok(())).unwrap();
    assert_eq!(a, b);

    let mut resumed: SrState = serde_json::from_str(&saved.unwrap()).unwrap();
    resumed.train_until(&pairs, None, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed, a);
    assert_eq!(a.history.len(), 6);
    assert_eq!(a.loss_csv().lines().next(), Some("iter,l1"));
    assert_eq!(a.loss_csv().lines().count(), 7);
}

#[test]
fn non_finite_data_aborts_before_update() {
    let hr = phantom(7, (9, 8, 8));
    let mut pairs = pairs_from_hr(&[hr], 4).unwrap();
    pairs[0].target.fill(f64::NAN);
    let mut state = SrState::new(
        small_spec(),
        SrTrainConfig {
            patch: (9, 8, 8),
            ..small_train(2)
        },
        4,
        3,
    )
    .unwrap();
    let before = state.clone();
    assert!(matches!(state.step(&pairs), Err(Error::NonFinite(_))));
    assert_eq!(state, before);

    let big = SrTrainConfig {
        patch: (9, 9, 8),
        ..small_train(1)
    };
    let mut state = SrState::new(small_spec(), big, 4, 3).unwrap();
    let ok = pairs_from_hr(&[phantom(7, (9, 8, 8))], 4).unwrap();
    assert!(matches!(state.step(&ok), Err(Error::Shape(_))));
}

#[test]
fn generator_overfits_a_single_patch() {
    let hr = make_phantom(&PhantomSpec {
        size: (17, 16, 16),
        seed: 8,
        noise_sd: 0.0,
        ..Default::default()
    })
    .unwrap();
    let full = &pairs_from_hr(&[hr], 4).unwrap()[0];
    let view = s![0..16, .., ..];
    let pair = TrainPair {
        input: full.input.slice(view).to_owned(),
        target: full.target.slice(view).to_owned(),
    };
    let spec = GeneratorSpec {
        num_res_blocks: 4,
        channels: 8,
        ..Default::default()
    };
    let cfg = SrTrainConfig {
        iterations: 5000,
        batch_size: 1,
        patch: (16, 16, 16),
        lr: 2e-3,
        ..Default::default()
    };
    let mut state = SrState::new(spec, cfg, 4, 9).unwrap();
    let pairs = [pair];
    let mut reached = None;
    while state.iteration < 5000 {
        if state.step(&pairs).unwrap().l1 < 1e-3 {
            reached = Some(state.iteration);
            break;
        }
    }
    assert!(
        reached.is_some(),
        "L1 stayed at {:.3e}",
        state.history.last().unwrap().l1
    );
    let vol = |a: &Array3<f64>| Volume3D::new(a.clone(), Spacing::isotropic(1.0)).unwrap();
    let out = state.refine(&pairs[0].input);
    assert!(psnr(&vol(&out), &vol(&pairs[0].target), 1.0).unwrap() > 40.0);
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = SrTrainConfig {
        iterations: 100,
        lr: 2e-3,
        cosine_min_lr_fraction: Some(0.1),
        ..Default::default()
    };
    assert_eq!(cfg.lr_at(0), 2e-3);
    assert!((cfg.lr_at(50) - 2e-3 * 0.55).abs() < 1e-15);
    assert!((cfg.lr_at(100) - 2e-4).abs() < 1e-15);
    assert_eq!(SrTrainConfig::default().lr_at(7), 1e-4);
    let bad = SrTrainConfig {
        cosine_min_lr_fraction: Some(1.5),
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn isotropic_input_spacing_is_preserved_in_plane() {
    let lr = Volume3D::from_shape_fn(
        (3, 4, 4),
        Spacing::new(3.0, 0.7, 0.9).unwrap(),
        |(z, y, x)| (z + y * x) as f64 * 0.1,
    )
    .unwrap();
    let state = SrState::new(small_spec(), small_train(1), 3, 1).unwrap();
    let out = sr_infer(&state, &lr, 3).unwrap();
    assert_eq!(out.spacing(), Spacing::new(1.0, 0.7, 0.9).unwrap());
    assert_eq!(out.depth(), 7);
}
