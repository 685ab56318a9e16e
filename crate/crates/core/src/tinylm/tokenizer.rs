//! Byte-level tokenizer and training-sequence assembly.

use super::TinylmError;
use crate::instructions::InstructionRecord;

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
/// Separator between the input span and the output span of a training
/// sequence. A dedicated id, never produced by encoding raw text, so a
/// literal `$` byte in code cannot collide with it.
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Stateless byte tokenizer: ids 0..=255 are raw bytes, 256..=259 specials.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub const VERSION: u32 = 1;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Inverse of [`encode`]: specials are stripped, byte ids reassemble the
    /// original UTF-8 string exactly.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Token ids with the position of the SEP splitting the input span from the
/// output span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub sep_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Input-span length p (BOS excluded, SEP excluded).
    pub fn input_len(&self) -> usize {
        self.sep_index.saturating_sub(1)
    }

    /// Output-span length q (SEP and EOS excluded).
    pub fn output_len(&self) -> usize {
        self.ids.len().saturating_sub(self.sep_index + 2)
    }

    /// The output span tokens y_1..y_q (without EOS).
    pub fn output_span(&self) -> &[u32] {
        let end = self.ids.len().saturating_sub(1);
        &self.ids[self.sep_index + 1..end]
    }
}

/// Assemble `[BOS, enc(instruction + "\n" + input), SEP, enc(output), EOS]`.
///
/// When the whole sequence exceeds `context_len` the input span is truncated
/// from the left; the output span is never cut. An output span that cannot
/// fit even with an empty input is rejected.
pub fn build_training_sequence(
    record: &InstructionRecord,
    tokenizer: &Tokenizer,
    context_len: usize,
) -> Result<TokenSequence, TinylmError> {
    let output = tokenizer.encode(&record.output);
    // BOS + SEP + EOS alongside the output span
    let overhead = 3;
    if output.len() + overhead > context_len {
        return Err(TinylmError::OutputTooLong {
            id: record.id.clone(),
            output: output.len(),
            context: context_len,
        });
    }

    let mut input = tokenizer.encode(&format!("{}\n{}", record.instruction, record.input));
    let budget = context_len - output.len() - overhead;
    if input.len() > budget {
        input.drain(..input.len() - budget);
    }

    let mut ids = Vec::with_capacity(input.len() + output.len() + overhead);
    ids.push(BOS);
    ids.extend_from_slice(&input);
    let sep_index = ids.len();
    ids.push(SEP);
    ids.extend_from_slice(&output);
    ids.push(EOS);

    Ok(TokenSequence { ids, sep_index })
}

/// Assemble the generation prompt `[BOS, enc(instruction + "\n" + input), SEP]`,
/// left-truncating the input so `reserve` tokens stay free for decoding.
pub fn build_prompt(
    record: &InstructionRecord,
    tokenizer: &Tokenizer,
    context_len: usize,
    reserve: usize,
) -> Vec<u32> {
    let mut input = tokenizer.encode(&format!("{}\n{}", record.instruction, record.input));
    let budget = context_len.saturating_sub(reserve + 2).max(1);
    if input.len() > budget {
        input.drain(..input.len() - budget);
    }
    let mut ids = Vec::with_capacity(input.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(&input);
    ids.push(SEP);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instructions::Task;
    use proptest::prelude::*;

    fn record(instruction: &str, input: &str, output: &str) -> InstructionRecord {
        InstructionRecord {
            id: "t".into(),
            task: Task::Identify,
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            cwe: None,
            source_pair_id: "t".into(),
        }
    }

    #[test]
    fn encode_empty_and_ascii() {
        let tok = Tokenizer;
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.encode("ab"), vec![97, 98]);
    }

    #[test]
    fn decode_strips_specials() {
        let tok = Tokenizer;
        assert_eq!(tok.decode(&[BOS, 104, 105, SEP, EOS, PAD]), "hi");
    }

    #[test]
    fn fixture_files_round_trip() {
        let tok = Tokenizer;
        let dir = crate::fixtures::microcorpus_dir();
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "c" || e == "cpp") {
                let text = std::fs::read_to_string(&path).unwrap();
                assert_eq!(tok.decode(&tok.encode(&text)), text, "{path:?}");
            }
        }
    }

    #[test]
    fn training_sequence_has_one_sep_and_decodable_output() {
        let tok = Tokenizer;
        let seq = build_training_sequence(&record("I", "X", "YES"), &tok, 64).unwrap();
        assert_eq!(seq.ids.iter().filter(|&&t| t == SEP).count(), 1);
        assert_eq!(seq.ids[seq.sep_index], SEP);
        assert_eq!(tok.decode(seq.output_span()), "YES");
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
    }

    #[test]
    fn over_long_input_is_left_truncated() {
        let tok = Tokenizer;
        let long_input = "x".repeat(100);
        let seq = build_training_sequence(&record("I", &long_input, "YES"), &tok, 32).unwrap();
        assert_eq!(seq.len(), 32);
        assert_eq!(tok.decode(seq.output_span()), "YES");
        // the surviving input span is the tail of instruction + "\n" + input
        let input_text = tok.decode(&seq.ids[1..seq.sep_index]);
        assert!(input_text.chars().all(|c| c == 'x'));
    }

    #[test]
    fn over_long_output_is_rejected() {
        let tok = Tokenizer;
        let result = build_training_sequence(&record("I", "X", &"y".repeat(40)), &tok, 32);
        assert!(matches!(result, Err(TinylmError::OutputTooLong { .. })));
    }

    #[test]
    fn prompt_ends_with_sep() {
        let tok = Tokenizer;
        let prompt = build_prompt(&record("I", "X", ""), &tok, 64, 8);
        assert_eq!(prompt[0], BOS);
        assert_eq!(*prompt.last().unwrap(), SEP);
    }

    proptest! {
        #[test]
        fn round_trip_any_utf8(s in "\\PC*") {
            let tok = Tokenizer;
            prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
        }

        #[test]
        fn sequence_shape_invariants(
            instr in "[a-z ]{0,20}",
            input in "[a-z\\n ]{0,200}",
            output in "[A-Z]{1,20}",
        ) {
            let tok = Tokenizer;
            let rec = record(&instr, &input, &output);
            let seq = build_training_sequence(&rec, &tok, 96).unwrap();
            prop_assert!(seq.len() <= 96);
            prop_assert_eq!(seq.ids.iter().filter(|&&t| t == SEP).count(), 1);
            prop_assert_eq!(seq.sep_index, seq.input_len() + 1);
            prop_assert_eq!(seq.output_len() + seq.sep_index + 2, seq.len());
            prop_assert_eq!(tok.decode(seq.output_span()), output);
        }
    }
}
