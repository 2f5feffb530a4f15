//! Small randomized models and examples for self-checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{MscExample, Role, Session, Utterance, Vocabulary, RESERVED};
use crate::error::Result;
use crate::gradcheck::{finite_diff_gradcheck, GradcheckOptions, GradcheckReport};
use crate::model::Model;
use crate::nn::Dropout;
use crate::variant::variant;

/// Reserved tokens followed by `w0, w1, ...` up to `size` entries.
pub fn word_vocab(size: usize) -> Vocabulary {
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain((0..size.saturating_sub(RESERVED.len())).map(|i| format!("w{i}")))
        .collect();
    Vocabulary::from_tokens(tokens, 1).expect("reserved prefix")
}

fn random_text<R: Rng>(rng: &mut R, vocab: &Vocabulary, max_len: usize) -> String {
    let words = vocab.len() - RESERVED.len();
    let n = rng.random_range(1..=max_len);
    (0..n)
        .map(|_| {
            vocab
                .token(RESERVED.len() + rng.random_range(0..words))
                .to_string()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_session<R: Rng>(
    rng: &mut R,
    vocab: &Vocabulary,
    turns: usize,
    max_len: usize,
) -> Session {
    Session::new(
        (0..turns)
            .map(|i| {
                let role = if i % 2 == 0 {
                    Role::User
                } else {
                    Role::Assistant
                };
                Utterance::new(role, random_text(rng, vocab, max_len))
            })
            .collect(),
    )
}

/// An example with `m` history sessions of 1-3 turns, a 1-2 turn context and
/// a 1-4 token response, all drawn from `vocab`'s ordinary words.
pub fn random_example<R: Rng>(
    rng: &mut R,
    vocab: &Vocabulary,
    m: usize,
    max_len: usize,
) -> MscExample {
    let history = (0..m)
        .map(|_| {
            let turns = rng.random_range(1..=3);
            random_session(rng, vocab, turns, max_len)
        })
        .collect();
    let context_turns = rng.random_range(1..=2);
    MscExample {
        history,
        context: random_session(rng, vocab, context_turns, max_len),
        response: Utterance::assistant(random_text(rng, vocab, 4)),
    }
}

/// A randomly initialized `variant` model on the tiny configuration.
pub fn tiny_model(variant_name: &str, vocab_size: usize, seed: u64) -> Result<Model> {
    let mut cfg = ModelConfig::tiny(vocab_size);
    cfg.seed = seed;
    Model::new(cfg, variant(variant_name)?, word_vocab(vocab_size))
}

/// Gradient check of the full model's sequence loss on the tiny
/// configuration: 30-token vocabulary, two history sessions, every
/// coordinate of every parameter.
pub fn tiny_model_gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = tiny_model("full", 30, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Non-trivial weights everywhere: layer-norm and bias initial values
    // sit at exactly 1 and 0.
    for idx in 0..model.params.len() {
        for v in model.params.value_mut(idx).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let ex = random_example(&mut rng, &model.vocab, 2, 5);
    let prepared = model.prepare(&ex)?;
    model.sequence_nll(&prepared)?;
    let report = finite_diff_gradcheck(
        &model.params,
        |store| {
            model
                .loss_with(store, &prepared, &mut Dropout::disabled())
                .expect("loss evaluates")
        },
        opts,
    );
    Ok(report)
}
