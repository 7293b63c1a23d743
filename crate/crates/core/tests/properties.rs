use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rowlm::dp::clip;
use rowlm::eval::{kway_marginal, marginal_tvd};
use rowlm::model::{l2_norm, PerExampleGrad};
use rowlm::sentence::{decode_sentence, encode_row, TokenizerMode, Vocabulary};
use rowlm::table::{quantile_edges, read_csv, ColumnCodec, Discretizer, LevelRow};

fn table_text(ints: &[i64], floats: &[f64], cats: &[u8]) -> String {
    let mut text = String::from("i,f,c\n");
    for ((a, b), c) in ints.iter().zip(floats).zip(cats) {
        text.push_str(&format!("{a},{b},k{c}\n"));
    }
    text
}

fn rows_for(cards: &[usize], picks: &[Vec<usize>]) -> Vec<LevelRow> {
    picks
        .iter()
        .map(|p| LevelRow(p.iter().zip(cards).map(|(v, k)| v % k).collect()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn levels_survive_invert_then_apply(
        ints in prop::collection::vec(-500i64..500, 30..300),
        seed in any::<u64>(),
    ) {
        let n = ints.len();
        let floats: Vec<f64> = ints.iter().map(|&i| i as f64 * 0.37 + 0.001 * (i % 7) as f64).collect();
        let cats: Vec<u8> = ints.iter().map(|&i| (i.rem_euclid(150)) as u8).collect();
        let table = read_csv(table_text(&ints, &floats, &cats).as_bytes()).unwrap();
        let disc = Discretizer::fit(&table.schema, &table.rows).unwrap();
        prop_assert!(disc.cardinalities().iter().all(|&k| (1..=100).contains(&k)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cards = disc.cardinalities();
        for r in 0..n.min(50) {
            let x = LevelRow(cards.iter().enumerate().map(|(j, k)| (r * 31 + j * 7 + seed as usize % 97) % k).collect());
            let surface = disc.invert(&x, &mut rng).unwrap();
            prop_assert_eq!(disc.apply(&surface, r).unwrap(), x);
        }
    }

    #[test]
    fn unknown_mass_is_the_tail_beyond_the_kept_values(cats in prop::collection::vec(0u16..400, 1..600)) {
        let text = std::iter::once("c".to_string())
            .chain(cats.iter().map(|c| format!("v{c}")))
            .collect::<Vec<_>>()
            .join("\n");
        let table = read_csv(text.as_bytes()).unwrap();
        let disc = Discretizer::fit(&table.schema, &table.rows).unwrap();
        let ColumnCodec::Categorical { categories, unknown } = &disc.columns[0].codec else {
            panic!("expected a categorical column")
        };
        let levels = disc.apply_all(&table.rows).unwrap();
        let unk = levels.iter().filter(|l| l.0[0] == categories.len()).count();
        let outside = table.rows.iter().filter(|r| !categories.contains(&r[0])).count();
        prop_assert_eq!(unk, outside);
        prop_assert_eq!(*unknown, outside > 0);
        prop_assert!(categories.len() <= 99);
    }

    #[test]
    fn quantile_bins_hold_equal_shares(n in 100usize..2500, scale in 0.01f64..100.0) {
        let sorted: Vec<f64> = (0..n).map(|i| i as f64 * scale + (i as f64).sqrt()).collect();
        let edges = quantile_edges(&sorted, 100);
        prop_assert_eq!(edges.len(), 101);
        let mut counts = vec![0usize; 100];
        for &v in &sorted {
            let k = edges[1..100].partition_point(|&e| e <= v);
            counts[k] += 1;
        }
        let (lo, hi) = (n / 100, n.div_ceil(100));
        prop_assert!(counts.iter().all(|&c| c >= lo && c <= hi), "{counts:?}");
    }

    #[test]
    fn sentences_round_trip(
        cards in prop::collection::vec(1usize..40, 1..6),
        picks in prop::collection::vec(prop::collection::vec(0usize..1000, 6), 1..10),
        semantic in any::<bool>(),
        shuffle in any::<u64>(),
    ) {
        let text = std::iter::once((0..cards.len()).map(|j| format!("c{j}")).collect::<Vec<_>>().join(","))
            .chain((0..40).map(|r| cards.iter().map(|k| format!("s{}", r % k)).collect::<Vec<_>>().join(",")))
            .collect::<Vec<_>>()
            .join("\n");
        let table = read_csv(text.as_bytes()).unwrap();
        let disc = Discretizer::fit(&table.schema, &table.rows).unwrap();
        prop_assert_eq!(disc.cardinalities(), cards.clone());
        let mode = if semantic { TokenizerMode::Semantic } else { TokenizerMode::Level };
        let vocab = Vocabulary::build(&disc, mode);
        let mut order: Vec<usize> = (0..cards.len()).collect();
        order.rotate_left(shuffle as usize % cards.len());
        for row in rows_for(&cards, &picks) {
            let encoded = encode_row(&vocab, &disc, &row, &order).unwrap();
            prop_assert!(encoded.len() <= vocab.max_sentence_len(&disc));
            prop_assert_eq!(decode_sentence(&vocab, &disc, &encoded.inputs).unwrap(), row);
        }
    }

    #[test]
    fn clipping_bounds_norm_and_sensitivity(
        a in prop::collection::vec(-1e3f64..1e3, 1..200),
        noise in prop::collection::vec(-1e3f64..1e3, 200),
        c in 1e-3f64..10.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + n).collect();
        let ca = clip(PerExampleGrad::new(a.clone()), c);
        let cb = clip(PerExampleGrad::new(b), c);
        prop_assert!(l2_norm(&ca.values) <= c * (1.0 + 1e-12));
        prop_assert!(l2_norm(&cb.values) <= c * (1.0 + 1e-12));
        let diff: Vec<f64> = ca.values.iter().zip(&cb.values).map(|(x, y)| x - y).collect();
        prop_assert!(l2_norm(&diff) <= 2.0 * c * (1.0 + 1e-12));
        if l2_norm(&a) <= c {
            prop_assert_eq!(ca.values, a);
        }
    }

    #[test]
    fn tvd_is_a_metric_and_marginals_agree(
        cards in prop::collection::vec(1usize..6, 2..4),
        x in prop::collection::vec(prop::collection::vec(0usize..100, 4), 1..80),
        y in prop::collection::vec(prop::collection::vec(0usize..100, 4), 1..80),
        z in prop::collection::vec(prop::collection::vec(0usize..100, 4), 1..80),
    ) {
        let (x, y, z) = (rows_for(&cards, &x), rows_for(&cards, &y), rows_for(&cards, &z));
        let m = |rows: &[LevelRow], idx: &[usize]| kway_marginal(rows, &cards, idx).unwrap();
        let pair = [0, 1];
        let (mx, my, mz) = (m(&x, &pair), m(&y, &pair), m(&z, &pair));
        let xy = marginal_tvd(&mx, &my).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&xy));
        prop_assert_eq!(xy, marginal_tvd(&my, &mx).unwrap());
        prop_assert_eq!(marginal_tvd(&mx, &mx).unwrap(), 0.0);
        prop_assert!(xy <= marginal_tvd(&mx, &mz).unwrap() + marginal_tvd(&mz, &my).unwrap() + 1e-12);

        for (axis, keep) in [(1, 0), (0, 1)] {
            let summed = mx.sum_out(axis).unwrap();
            let direct = m(&x, &[keep]);
            prop_assert_eq!(&summed.shape, &direct.shape);
            for (a, b) in summed.freq.iter().zip(&direct.freq) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
