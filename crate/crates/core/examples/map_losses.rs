//! Moves one model's token losses into the target tokenization and shows
//! that the per-sample total is unchanged.

use csvscale::data::{ModelLossRecord, TokenSpan, ValidationSample};
use csvscale::lossmap::{expand_to_char_losses, map_losses};

fn spans(pairs: &[(usize, usize)]) -> Vec<TokenSpan> {
    pairs.iter().map(|&(s, e)| TokenSpan::new(s, e)).collect()
}

fn main() -> csvscale::Result<()> {
    let sample = ValidationSample {
        sample_id: "bbh-0001".into(),
        source_tag: "bbh".into(),
        text: "The answer is (B).".into(),
        target_spans: spans(&[(0, 3), (3, 10), (10, 13), (13, 15), (15, 16), (16, 18)]),
        answer_spans: Some(spans(&[(15, 16)])),
    };
    let record = ModelLossRecord {
        model_id: "other-tokenizer-7b".into(),
        sample_id: sample.sample_id.clone(),
        source_spans: spans(&[(0, 4), (4, 11), (11, 14), (14, 18)]),
        token_nll: vec![3.1, 1.7, 0.4, 2.2],
    };

    let chars = expand_to_char_losses(&record.source_spans, &record.token_nll, sample.char_count())?;
    println!("per-character losses: {:.3?}", chars.as_slice());

    let mapped = map_losses(&record, &sample)?;
    let text: Vec<char> = sample.text.chars().collect();
    for (span, loss) in sample.target_spans.iter().zip(mapped.as_slice()) {
        let piece: String = text[span.start..span.end].iter().collect();
        println!("{:>10} {span} {loss:.4}", format!("{piece:?}"));
    }
    let source_total: f64 = record.token_nll.iter().sum();
    println!("source total {source_total:.12}, target total {:.12}", mapped.total());
    Ok(())
}
