use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rowlm::model::{backward, init_model, row_loss, Guiding, ModelConfig, TransformerParams};
use rowlm::sentence::{encode_row, EncodedRow, TokenizerMode, Vocabulary};
use rowlm::table::{ColumnCodec, ColumnKind, ColumnSpec, Discretizer, LevelRow};
use rowlm::trie::ColumnTrieSet;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-5;

struct Fixture {
    vocab: Vocabulary,
    tries: ColumnTrieSet,
    row: EncodedRow,
    params: TransformerParams<f64>,
}

fn fixture(seed: u64, dropout: f64) -> Fixture {
    let col = |n: &str| ColumnSpec {
        name: n.into(),
        kind: ColumnKind::Categorical,
        codec: ColumnCodec::Categorical {
            categories: vec!["a".into(), "b".into()],
            unknown: false,
        },
    };
    let disc = Discretizer {
        columns: vec![col("x"), col("y"), col("z")],
    };
    let vocab = Vocabulary::build(&disc, TokenizerMode::Level);
    assert_eq!(vocab.size(), 12);
    let tries = ColumnTrieSet::build(&vocab, &disc).unwrap();
    let row = encode_row(&vocab, &disc, &LevelRow(vec![1, 0, 1]), &[0, 1, 2]).unwrap();
    assert_eq!(row.len(), 9);
    let cfg = ModelConfig {
        layers: 1,
        width: 8,
        heads: 2,
        context: 9,
        vocab: 12,
        dropout,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: TransformerParams<f64> = init_model(cfg, &mut rng).unwrap();
    // move off the init so layer norms see well-scaled inputs and biases are nonzero
    let jitter = Normal::new(0.0, 0.2).unwrap();
    for p in params.data.iter_mut() {
        *p += jitter.sample(&mut rng);
    }
    Fixture {
        vocab,
        tries,
        row,
        params,
    }
}

fn worst_error(fx: &mut Fixture, guiding: Guiding, train: bool) -> (f64, String) {
    let dropout_seed = 99;
    let (_, grad) = backward(
        &fx.params,
        &fx.vocab,
        &fx.tries,
        &fx.row,
        guiding,
        train,
        &mut ChaCha8Rng::seed_from_u64(dropout_seed),
    )
    .unwrap();
    let names = fx.params.layout.named();
    let mut worst = (0.0, String::new());
    for i in 0..fx.params.len() {
        let x = fx.params.data[i];
        let mut eval = |v: f64| {
            fx.params.data[i] = v;
            row_loss(
                &fx.params,
                &fx.vocab,
                &fx.tries,
                &fx.row,
                guiding,
                train,
                &mut ChaCha8Rng::seed_from_u64(dropout_seed),
            )
            .unwrap()
        };
        let numeric = (eval(x + STEP) - eval(x - STEP)) / (2.0 * STEP);
        fx.params.data[i] = x;
        let rel = (grad.values[i] - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > worst.0 {
            let (name, _) = names.iter().find(|(_, t)| t.range().contains(&i)).unwrap();
            worst = (rel, name.clone());
        }
    }
    worst
}

#[test]
fn trie_guided_gradient_matches_finite_differences() {
    let (err, at) = worst_error(&mut fixture(0, 0.0), Guiding::Trie, false);
    assert!(err <= TOL, "max relative error {err:e} in {at}");
}

#[test]
fn unguided_gradient_matches_finite_differences() {
    let (err, at) = worst_error(&mut fixture(0, 0.0), Guiding::None, false);
    assert!(err <= TOL, "max relative error {err:e} in {at}");
}

#[test]
fn gradient_with_fixed_dropout_masks_matches() {
    let (err, at) = worst_error(&mut fixture(0, 0.1), Guiding::Trie, true);
    assert!(err <= TOL, "max relative error {err:e} in {at}");
}

