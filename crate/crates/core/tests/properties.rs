use clickforge_core::evalbench::decay;
use clickforge_core::guidance::*;
use clickforge_core::losses::*;
use clickforge_core::netcore::{ParamSet, ParamTensor, Partition, Scope};
use clickforge_core::protocol::MaskRle;
use clickforge_core::raster::*;
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(0u8..=1, h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
}

fn prob_strategy(h: usize, w: usize) -> impl Strategy<Value = ProbMap> {
    proptest::collection::vec(0.0f64..=1.0, h * w).prop_map(move |d| ProbMap::new(h, w, d).unwrap())
}

fn clicks_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<Click>> {
    proptest::collection::vec((0..h, 0..w, any::<bool>()), 0..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (r, c, pos))| {
                if pos {
                    Click::positive(r, c, i as u32 + 1)
                } else {
                    Click::negative(r, c, i as u32 + 1)
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_reflexive(a in mask_strategy(6, 7), b in mask_strategy(6, 7)) {
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let v = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn disks_match_their_definition(clicks in clicks_strategy(12, 10), radius in 1usize..6) {
        let g = render_disks(&clicks, 12, 10, radius).unwrap();
        for r in 0..12 {
            for c in 0..10 {
                for (pol, map) in [(Polarity::Positive, &g.positive), (Polarity::Negative, &g.negative)] {
                    let near = clicks.iter().any(|k| {
                        k.polarity == pol && {
                            let dr = r as i64 - k.row as i64;
                            let dc = c as i64 - k.col as i64;
                            dr * dr + dc * dc <= (radius * radius) as i64
                        }
                    });
                    prop_assert_eq!(map.get(r, c), near);
                }
            }
        }
    }

    #[test]
    fn disks_ignore_click_order(clicks in clicks_strategy(12, 10)) {
        let mut reversed = clicks.clone();
        reversed.reverse();
        prop_assert_eq!(
            render_disks(&clicks, 12, 10, 5).unwrap(),
            render_disks(&reversed, 12, 10, 5).unwrap()
        );
    }

    #[test]
    fn robot_click_hits_a_disagreement(pred in mask_strategy(9, 11), gt in mask_strategy(9, 11)) {
        prop_assume!(pred != gt);
        let click = next_robot_click(&pred, &gt, 1).unwrap();
        prop_assert_ne!(pred.get(click.row, click.col), gt.get(click.row, click.col));
        let expected = if gt.get(click.row, click.col) { Polarity::Positive } else { Polarity::Negative };
        prop_assert_eq!(click.polarity, expected);
    }

    #[test]
    fn correcting_the_clicked_component_reduces_error(pred in mask_strategy(9, 11), gt in mask_strategy(9, 11)) {
        prop_assume!(pred != gt);
        let click = next_robot_click(&pred, &gt, 1).unwrap();
        let error = Mask::from_fn(9, 11, |r, c| pred.get(r, c) != gt.get(r, c));
        let (labels, _) = connected_components(&error);
        let hit = labels[click.row * 11 + click.col];
        let fixed = Mask::from_fn(9, 11, |r, c| {
            if labels[r * 11 + c] == hit { gt.get(r, c) } else { pred.get(r, c) }
        });
        let errors = |m: &Mask| (0..9).flat_map(|r| (0..11).map(move |c| (r, c))).filter(|&(r, c)| m.get(r, c) != gt.get(r, c)).count();
        prop_assert!(errors(&fixed) < errors(&pred));
    }

    #[test]
    fn focal_loss_survives_duplication(p in prob_strategy(4, 5), y in mask_strategy(4, 5), gamma in 0.0f64..4.0) {
        let stack = |a: &[f64]| [a, a].concat();
        let p2 = ProbMap::new(8, 5, stack(p.as_slice())).unwrap();
        let y2 = Mask::new(8, 5, [y.as_slice(), y.as_slice()].concat()).unwrap();
        let a = normalized_focal_loss(&p, &y, gamma).unwrap();
        let b = normalized_focal_loss(&p2, &y2, gamma).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn sparse_loss_is_monotone_on_disks(p in prob_strategy(10, 10), clicks in clicks_strategy(10, 10), idx in 0usize..100) {
        let g = render_disks(&clicks, 10, 10, 2).unwrap();
        let base = sparse_click_loss(&p, &g).unwrap();
        prop_assert!(base >= 0.0);
        let h = 1e-3;
        let mut up = p.as_slice().to_vec();
        up[idx] = (up[idx] + h).min(1.0);
        let moved = sparse_click_loss(&ProbMap::new(10, 10, up).unwrap(), &g).unwrap();
        let (pos, neg) = (g.positive.as_slice()[idx] == 1, g.negative.as_slice()[idx] == 1);
        if pos && !neg {
            prop_assert!(moved <= base + 1e-15);
        }
        if neg && !pos {
            prop_assert!(moved >= base - 1e-15);
        }
    }

    #[test]
    fn anchor_is_symmetric(a in proptest::collection::vec(-2.0f32..2.0, 6), b in proptest::collection::vec(-2.0f32..2.0, 6)) {
        let set = |d: Vec<f32>| ParamSet::new(vec![
            ParamTensor { name: "x".into(), shape: vec![2, 3], partition: Partition::Adm, data: d },
        ]).unwrap();
        let (x, y) = (set(a), set(b));
        prop_assert_eq!(
            anchor_regularizer(&x, &y, Scope::All).unwrap(),
            anchor_regularizer(&y, &x, Scope::All).unwrap()
        );
    }

    #[test]
    fn rle_round_trips(m in mask_strategy(7, 13)) {
        prop_assert_eq!(MaskRle::encode(&m).decode().unwrap(), m);
    }

    #[test]
    fn decay_is_antisymmetric_about_base(base in 0.5f64..20.0, delta in 0.0f64..5.0) {
        prop_assert_eq!(decay(base, base).unwrap(), 0.0);
        let up = decay(base, base + delta).unwrap();
        let down = decay(base, base - delta).unwrap();
        prop_assert!((up + down).abs() < 1e-9);
    }
}

#[test]
fn generated_values_stay_in_range() {
    for spec in [DomainSpec::source(5), DomainSpec::shifted(5), DomainSpec::changed(5)] {
        for s in generate_dataset(&spec, 20).unwrap() {
            assert!(s.mask.as_slice().iter().all(|&v| v <= 1));
            for r in 0..s.image.height() {
                for c in 0..s.image.width() {
                    for ch in 0..3 {
                        let v = s.image.value(r, c, ch);
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }
}
