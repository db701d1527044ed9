use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::{GenerationRequest, Generator, Prediction, PromptBuilder};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// What a failed run had finished before it stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialProgress {
    pub done: Vec<String>,
    pub failed: String,
    pub error: String,
}

impl PartialProgress {
    pub fn from_error(err: &Error) -> Option<Self> {
        match err {
            Error::Aborted {
                done,
                failed_id,
                source,
            } => Some(Self {
                done: done.clone(),
                failed: failed_id.clone(),
                error: source.to_string(),
            }),
            _ => None,
        }
    }
}

/// Generates one prediction per record with up to `max_in_flight` concurrent
/// requests. Output order is corpus order regardless of completion order.
/// The first failure stops dispatch and is reported as [`Error::Aborted`]
/// listing every record that completed.
pub async fn run_corpus(
    corpus: &Corpus,
    prompts: &PromptBuilder,
    generator: &Generator,
    max_new_tokens: u32,
    max_in_flight: usize,
) -> Result<Vec<Prediction>> {
    if max_in_flight == 0 {
        return Err(Error::Config("max_in_flight must be positive".to_string()));
    }
    let requests = corpus
        .iter()
        .map(|r| Ok(GenerationRequest::greedy(prompts.build(r)?, max_new_tokens)))
        .collect::<Result<Vec<_>>>()?;
    let style = prompts.style();

    let mut results = stream::iter(corpus.iter().zip(requests).enumerate())
        .map(|(idx, (record, request))| async move {
            let out = generator
                .generate(&request, Some(&record.id))
                .await
                .and_then(|o| {
                    Prediction::new(
                        record.id.clone(),
                        o.text,
                        o.token_logprobs,
                        generator.model_tag(),
                        style,
                    )
                    .map_err(|e| Error::Protocol {
                        record_id: Some(record.id.clone()),
                        message: e.to_string(),
                    })
                });
            (idx, out)
        })
        .buffer_unordered(max_in_flight);

    let mut slots: Vec<Option<Prediction>> = vec![None; corpus.len()];
    let mut failure = None;
    while let Some((idx, out)) = results.next().await {
        match out {
            Ok(p) => slots[idx] = Some(p),
            Err(e) => {
                failure = Some((idx, e));
                break;
            }
        }
    }
    drop(results);

    if let Some((idx, source)) = failure {
        let done = corpus
            .iter()
            .zip(&slots)
            .filter(|(_, s)| s.is_some())
            .map(|(r, _)| r.id.clone())
            .collect();
        return Err(Error::Aborted {
            done,
            failed_id: corpus.records[idx].id.clone(),
            source: Box::new(source),
        });
    }
    Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
}
