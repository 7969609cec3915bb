use clickforge_core::adapter::{predict, AdaptConfig, AdaptMode, Session};
use clickforge_core::guidance::{render_disks, Click, DISK_RADIUS};
use clickforge_core::losses::sparse_click_loss;
use clickforge_core::netcore::{ModelConfig, Network, ParamSet, Scope};
use clickforge_core::raster::{generate_dataset, DomainSpec, Sample};
use clickforge_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn setup(seed: u64) -> (Network, ParamSet, Vec<Sample>) {
    let net = Network::new(ModelConfig::tiny()).unwrap();
    let params = net.init_params(seed);
    let data = generate_dataset(&DomainSpec::source(seed).with_size(SIDE, SIDE), 4).unwrap();
    (net, params, data)
}

fn random_clicks(n: usize, seed: u64) -> Vec<Click> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..=n as u32)
        .map(|k| {
            let (r, c) = (rng.random_range(0..SIDE), rng.random_range(0..SIDE));
            if k == 1 || rng.random_bool(0.5) {
                Click::positive(r, c, k)
            } else {
                Click::negative(r, c, k)
            }
        })
        .collect()
}

/// Mean squared distance between the scoped tensors of `a` and `b`.
fn displacement(a: &ParamSet, b: &ParamSet, scope: Scope) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in a.iter().filter(|t| scope.contains(t.partition)) {
        let u = b.get(&t.name).unwrap();
        for (x, y) in t.data.iter().zip(&u.data) {
            sum += (f64::from(*x) - f64::from(*y)).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn local_fuzz_never_touches_the_bsm() {
    let (net, params, data) = setup(3);
    let cfg = AdaptConfig {
        lr_adm: 1e-2,
        ..AdaptConfig::default()
    };
    let mut s = Session::begin("fuzz", &net, data[0].image.clone(), &params, cfg).unwrap();
    for click in random_clicks(100, 17) {
        s.process_click(&net, click).unwrap();
    }
    assert!(s.params().bit_equal(&params, Scope::Bsm));
    assert!(!s.params().bit_equal(&params, Scope::Adm));
}

#[test]
fn mode_off_is_transparent() {
    let (net, params, data) = setup(4);
    let cfg = AdaptConfig::default().with_mode(AdaptMode::Off);
    let run = || {
        let mut s = Session::begin("off", &net, data[1].image.clone(), &params, cfg.clone()).unwrap();
        let masks: Vec<_> = random_clicks(12, 5)
            .into_iter()
            .map(|c| s.process_click(&net, c).unwrap().binarize(0.5))
            .collect();
        assert!(s.anchor().is_none());
        let (_, end) = s.end().unwrap();
        assert!(end.bit_equal(&params, Scope::All));
        masks
    };
    assert_eq!(run(), run());
}

#[test]
fn sparse_loss_does_not_increase_at_small_rate() {
    let (net, params, data) = setup(5);
    for (i, sample) in data.iter().enumerate() {
        let mut cfg = AdaptConfig {
            lr_adm: 1e-5,
            steps_per_click: 1,
            ..AdaptConfig::default()
        };
        cfg.loss.lambda_dense = 0.0;
        cfg.loss.lambda_anchor = 0.0;
        let mut s = Session::begin(format!("s{i}"), &net, sample.image.clone(), &params, cfg).unwrap();
        let click = Click::positive(SIDE / 2, SIDE / 2, 1);
        let g = render_disks(&[click], SIDE, SIDE, DISK_RADIUS).unwrap();
        let (_, before) = predict(&net, &params, &sample.image, &[click], true).unwrap();
        s.process_click(&net, click).unwrap();
        for _ in 0..4 {
            s.adaptation_step(&net).unwrap();
        }
        let after = s.refined_after(&net);
        let l0 = sparse_click_loss(&before, &g).unwrap();
        let l1 = sparse_click_loss(&after, &g).unwrap();
        assert!(l1 <= l0, "image {i}: {l1} > {l0}");
    }
}

trait Refresh {
    fn refined_after(&self, net: &Network) -> clickforge_core::raster::ProbMap;
}

impl Refresh for Session {
    fn refined_after(&self, net: &Network) -> clickforge_core::raster::ProbMap {
        predict(net, self.params(), self.image(), self.clicks(), true).unwrap().1
    }
}

fn displacement_with(lambda_anchor: f64, lr_adm: f64, steps: usize) -> f64 {
    let (net, params, data) = setup(6);
    let mut cfg = AdaptConfig {
        lr_adm,
        steps_per_click: steps,
        ..AdaptConfig::default()
    };
    cfg.loss.lambda_anchor = lambda_anchor;
    let mut s = Session::begin("sweep", &net, data[2].image.clone(), &params, cfg).unwrap();
    for click in random_clicks(6, 8) {
        s.process_click(&net, click).unwrap();
    }
    displacement(s.params(), s.anchor().unwrap(), Scope::Adm)
}

#[test]
fn displacement_shrinks_as_the_anchor_weight_grows() {
    let sweep: Vec<f64> = [5e-4, 5e-3, 5e-2, 5e-1]
        .iter()
        .map(|&l| displacement_with(l, 1e-2, 3))
        .collect();
    assert!(sweep[0] > 0.0);
    for w in sweep.windows(2) {
        assert!(w[1] <= w[0], "{sweep:?}");
    }
}

#[test]
fn huge_anchor_weight_pins_the_parameters() {
    let lr = AdaptConfig::default().lr_adm;
    let strong = displacement_with(1e6, lr, 10);
    let weak = displacement_with(5e-3, lr, 10);
    assert!(strong < weak, "{strong} vs {weak}");
}

#[test]
fn zero_weights_leave_parameters_alone() {
    let (net, params, data) = setup(7);
    let mut cfg = AdaptConfig::default().with_mode(AdaptMode::Global);
    cfg.loss.lambda_sparse = 0.0;
    cfg.loss.lambda_dense = 0.0;
    cfg.loss.lambda_anchor = 0.0;
    let mut s = Session::begin("zero", &net, data[0].image.clone(), &params, cfg).unwrap();
    for click in random_clicks(5, 9) {
        s.process_click(&net, click).unwrap();
    }
    assert!(s.params().bit_equal(&params, Scope::All));
}

#[test]
fn dense_term_waits_for_enough_clicks() {
    let (net, params, data) = setup(8);
    let cfg = AdaptConfig::default();
    let gate = cfg.loss.dense_activation_clicks;
    let mut s = Session::begin("gate", &net, data[0].image.clone(), &params, cfg).unwrap();
    for click in random_clicks(gate + 1, 10) {
        s.process_click(&net, click).unwrap();
    }
    for r in s.step_log() {
        if (r.ordinal as usize) < gate {
            assert_eq!(r.dense, 0.0);
        } else {
            assert!(r.dense > 0.0);
        }
    }
    assert_eq!(s.step_log().len(), (gate + 1) * 3);
}

#[test]
fn sessions_chain_their_anchors() {
    let (net, params, data) = setup(9);
    let cfg = AdaptConfig {
        lr_adm: 1e-2,
        ..AdaptConfig::default().with_mode(AdaptMode::Global)
    };
    let mut live = params.clone();
    for (k, sample) in data.iter().take(3).enumerate() {
        let mut s = Session::begin(format!("seq{k}"), &net, sample.image.clone(), &live, cfg.clone()).unwrap();
        assert!(s.anchor().unwrap().bit_equal(&live, Scope::All));
        let anchor_at_start = s.anchor().unwrap().clone();
        for click in random_clicks(4, 11 + k as u64) {
            s.process_click(&net, click).unwrap();
        }
        assert_eq!(s.anchor().unwrap(), &anchor_at_start);
        let refined = s.refined().unwrap().clone();
        let (mask, next) = s.end().unwrap();
        assert_eq!(mask, refined.binarize(0.5));
        assert!(!next.bit_equal(&live, Scope::Adm));
        live = next;
    }
}

#[test]
fn sessions_are_isolated() {
    let (net, params, data) = setup(10);
    let cfg = AdaptConfig {
        lr_adm: 1e-2,
        ..AdaptConfig::default()
    };
    let mut a = Session::begin("a", &net, data[0].image.clone(), &params, cfg.clone()).unwrap();
    let b = Session::begin("b", &net, data[1].image.clone(), &params, cfg).unwrap();
    for click in random_clicks(5, 12) {
        a.process_click(&net, click).unwrap();
    }
    assert!(b.params().bit_equal(&params, Scope::All));
    assert!(b.anchor().unwrap().bit_equal(&params, Scope::Adm));
    assert!(!a.params().bit_equal(b.params(), Scope::Adm));
}

#[test]
fn ordering_and_bounds_are_enforced() {
    let (net, params, data) = setup(11);
    let mut s = Session::begin("o", &net, data[0].image.clone(), &params, AdaptConfig::default()).unwrap();
    assert!(matches!(
        s.process_click(&net, Click::positive(1, 1, 2)),
        Err(Error::Ordinal { expected: 1, got: 2 })
    ));
    s.process_click(&net, Click::positive(1, 1, 1)).unwrap();
    assert!(matches!(
        s.process_click(&net, Click::positive(1, 1, 1)),
        Err(Error::Ordinal { expected: 2, got: 1 })
    ));
    assert!(matches!(
        s.process_click(&net, Click::negative(SIDE, 0, 2)),
        Err(Error::ClickOutOfBounds { .. })
    ));
    assert_eq!(s.clicks().len(), 1);
}

#[test]
fn diverging_update_is_rolled_back() {
    let (net, params, data) = setup(12);
    let cfg = AdaptConfig {
        lr_adm: 1e300,
        ..AdaptConfig::default()
    };
    let mut s = Session::begin("nan", &net, data[0].image.clone(), &params, cfg).unwrap();
    let err = s.process_click(&net, Click::positive(8, 8, 1)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(s.params().bit_equal(&params, Scope::All));
    assert!(s.clicks().is_empty());
    assert!(s.step_log().is_empty());
    assert!(s.mask().is_empty());
}

#[test]
fn undo_restores_the_previous_state() {
    let (net, params, data) = setup(13);
    let cfg = AdaptConfig {
        lr_adm: 1e-2,
        ..AdaptConfig::default()
    };
    let mut s = Session::begin("u", &net, data[0].image.clone(), &params, cfg).unwrap();
    assert!(s.undo().is_err());
    s.process_click(&net, Click::positive(8, 8, 1)).unwrap();
    let after_one = (s.params().clone(), s.mask());
    s.process_click(&net, Click::negative(0, 0, 2)).unwrap();
    assert_eq!(s.undo().unwrap(), after_one.1);
    assert!(s.params().bit_equal(&after_one.0, Scope::All));
    s.undo().unwrap();
    assert!(s.mask().is_empty());
    assert!(s.params().bit_equal(&params, Scope::All));
    assert!(!s.can_undo());
}
