use super::assemble::{decoder_states, AssembledInput};
use super::decoder::DecoderParams;
use super::projector::ProjectorParams;
use super::vocab::{Vocab, EOS};
use super::{InstructError, Result};
use crate::tensor::Tape;

/// Inputs decoded together per tape.
const DECODE_CHUNK: usize = 16;

/// Collapses whitespace runs and trims.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub prediction: String,
    pub truth: String,
    pub correct: bool,
}

impl Prediction {
    pub fn new(prediction: String, truth: &str) -> Self {
        let correct = normalize_answer(&prediction) == normalize_answer(truth);
        Self {
            prediction,
            truth: truth.to_string(),
            correct,
        }
    }
}

/// Greedy decoding of one prompt-only input.
pub fn predict(
    dec: &DecoderParams,
    proj: &ProjectorParams,
    input: &AssembledInput,
    vocab: &Vocab,
    max_len: usize,
) -> Result<String> {
    Ok(predict_batch(dec, proj, std::slice::from_ref(input), vocab, max_len)?.remove(0))
}

/// Greedy decoding of each input: take the arg-max token (lowest id on
/// ties) until `<eos>` or `max_len` generated tokens. Inputs that carry an
/// answer are cut back to their prompt first.
pub fn predict_batch(
    dec: &DecoderParams,
    proj: &ProjectorParams,
    inputs: &[AssembledInput],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(DECODE_CHUNK) {
        let mut seqs: Vec<AssembledInput> = chunk.iter().map(AssembledInput::prompt_only).collect();
        let mut generated: Vec<Vec<usize>> = vec![Vec::new(); seqs.len()];
        let mut active: Vec<usize> = (0..seqs.len()).collect();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let tape = Tape::new();
            let batch: Vec<&AssembledInput> = active.iter().map(|&i| &seqs[i]).collect();
            let bound = dec.bind(&tape);
            let (h, _) = decoder_states(
                &bound,
                Some(&proj.bind(&tape)),
                &batch,
                &vec![1; batch.len()],
            )?;
            let logits = bound.logits(h)?;
            let logits = logits.value();
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                if best == EOS {
                    continue;
                }
                generated[i].push(best);
                seqs[i].push_token(best);
                still.push(i);
            }
            active = still;
        }
        out.extend(generated.iter().map(|g| vocab.decode(g)));
    }
    Ok(out)
}

/// Fraction of exact matches after whitespace normalization.
pub fn evaluate_accuracy(predictions: &[String], truths: &[String]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(InstructError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(InstructError::EmptyTarget);
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| normalize_answer(p) == normalize_answer(t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn accuracy_fractions() {
        assert_eq!(
            evaluate_accuracy(&s(&["a", "b"]), &s(&["a", "b"])).unwrap(),
            1.0
        );
        assert_eq!(
            evaluate_accuracy(&s(&["x", "y"]), &s(&["a", "b"])).unwrap(),
            0.0
        );
        assert_eq!(
            evaluate_accuracy(&s(&["a", "b", "c", "x"]), &s(&["a", "b", "c", "d"])).unwrap(),
            0.75
        );
        assert!(evaluate_accuracy(&s(&["a"]), &s(&[])).is_err());
    }

    #[test]
    fn whitespace_is_normalized_but_case_is_not() {
        assert!(Prediction::new("  Action   Figures ".into(), "Action Figures").correct);
        assert!(!Prediction::new("yes".into(), "Yes").correct);
        assert!(!Prediction::new("Action".into(), "Action Figures").correct);
    }
}

#[cfg(test)]
mod decode_tests {
    use super::*;
    use crate::instruct::assemble::{assemble_decoder_input, assemble_text, ImageMode};
    use crate::instruct::fixtures::{fixture, tiny_decoder};
    use crate::instruct::{pretrain_decoder, DecoderConfig};

    #[test]
    fn greedy_decoding_is_deterministic_and_bounded() {
        let f = fixture();
        let corpus: Vec<AssembledInput> = f
            .prompts
            .iter()
            .map(|p| assemble_text(p, &f.vocab))
            .collect();
        let (dec, _) = pretrain_decoder(
            &corpus,
            f.vocab.len(),
            &DecoderConfig {
                epochs: 20,
                ..tiny_decoder()
            },
        )
        .unwrap();
        let proj = ProjectorParams::init(f.feats.d(), dec.d_dec, 0);
        let inputs: Vec<AssembledInput> = f
            .prompts
            .iter()
            .map(|p| {
                assemble_decoder_input(&p.without_answer(), &f.vocab, &f.feats, ImageMode::Mean)
                    .unwrap()
            })
            .collect();
        let a = predict_batch(&dec, &proj, &inputs, &f.vocab, 4).unwrap();
        let b = predict_batch(&dec, &proj, &inputs, &f.vocab, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(predict(&dec, &proj, &inputs[2], &f.vocab, 4).unwrap(), a[2]);
        for p in &a {
            assert!(p.split_whitespace().count() <= 4);
        }
        let one = predict_batch(&dec, &proj, &inputs, &f.vocab, 1).unwrap();
        for p in &one {
            assert!(p.split_whitespace().count() <= 1);
            assert!(!Prediction::new(p.clone(), "two words").correct);
        }
    }
}
