//! JSONL transcript serialization, schema `trace_v1`.
//!
//! A trace file holds one header record (config and prompt), one record per
//! step, and one footer record (termination, tokens, answer). Floats are
//! written with shortest round-trip formatting, so a parsed trace reproduces
//! the in-memory transcript exactly, apart from the input embeddings, which
//! are not stored.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DecodeConfig, InputMode, StepTrace, Termination, Transcript};
use crate::dist::{TokenId, TopKCandidates};
use crate::error::{Error, FormatError, Result};
use crate::gate::{EntropyReading, GateDecision, GateMode};

pub const SCHEMA: &str = "trace_v1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Header {
        schema: String,
        config: DecodeConfig,
        prompt: Vec<TokenId>,
    },
    Step {
        schema: String,
        step: usize,
        entropy_raw: f64,
        entropy_norm: f64,
        mode: InputMode,
        gate: Option<GateMode>,
        token: TokenId,
        top_candidates: Vec<(TokenId, f64)>,
        dominant_prob: f64,
        runner_up_prob: Option<f64>,
    },
    Footer {
        schema: String,
        termination: Termination,
        tokens: Vec<TokenId>,
        answer: Vec<TokenId>,
    },
}

fn step_record(s: &StepTrace) -> Record {
    Record::Step {
        schema: SCHEMA.into(),
        step: s.step,
        entropy_raw: s.entropy.raw,
        entropy_norm: s.entropy.normalized,
        mode: s.mode,
        gate: s.gate.map(|g| g.mode),
        token: s.token,
        top_candidates: s.candidates.iter().collect(),
        dominant_prob: s.dominant_prob(),
        runner_up_prob: s.runner_up_prob(),
    }
}

/// Writes `transcript` as JSONL, one record per line.
pub fn write_trace<W: Write>(transcript: &Transcript, mut out: W) -> Result<()> {
    let mut line = |r: &Record| -> Result<()> {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&Record::Header {
        schema: SCHEMA.into(),
        config: transcript.config.clone(),
        prompt: transcript.prompt.clone(),
    })?;
    for s in &transcript.steps {
        line(&step_record(s))?;
    }
    line(&Record::Footer {
        schema: SCHEMA.into(),
        termination: transcript.termination,
        tokens: transcript.tokens.clone(),
        answer: transcript.answer.clone(),
    })
}

pub fn trace_to_string(transcript: &Transcript) -> String {
    let mut buf = Vec::new();
    write_trace(transcript, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

fn bad(line: usize, reason: impl Into<String>) -> Error {
    FormatError::Trace {
        line,
        reason: reason.into(),
    }
    .into()
}

/// Parses a trace written by [`write_trace`].
pub fn read_trace<R: BufRead>(input: R) -> Result<Transcript> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut footer = None;

    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if footer.is_some() {
            return Err(bad(n, "record after footer"));
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
        match record {
            Record::Header { schema, config, prompt } => {
                check_schema(n, &schema)?;
                if header.is_some() {
                    return Err(bad(n, "duplicate header"));
                }
                header = Some((config, prompt));
            }
            Record::Step {
                schema,
                step,
                entropy_raw,
                entropy_norm,
                mode,
                gate,
                token,
                top_candidates,
                ..
            } => {
                check_schema(n, &schema)?;
                let Some((config, _)) = &header else {
                    return Err(bad(n, "step before header"));
                };
                if step != steps.len() {
                    return Err(bad(n, format!("expected step {}, found {step}", steps.len())));
                }
                let (tokens, probs) = top_candidates.into_iter().unzip();
                let candidates = TopKCandidates::new(tokens, probs).map_err(|e| bad(n, e.to_string()))?;
                let entropy = EntropyReading {
                    raw: entropy_raw,
                    normalized: entropy_norm,
                    k: candidates.k(),
                };
                let gate = gate.map(|mode| GateDecision {
                    mode,
                    threshold: config.tau,
                    reading: entropy,
                });
                steps.push(StepTrace {
                    step,
                    entropy,
                    gate,
                    token,
                    mode,
                    candidates,
                });
            }
            Record::Footer {
                schema,
                termination,
                tokens,
                answer,
            } => {
                check_schema(n, &schema)?;
                if header.is_none() {
                    return Err(bad(n, "footer before header"));
                }
                footer = Some((termination, tokens, answer));
            }
        }
    }

    let (config, prompt) = header.ok_or_else(|| bad(0, "missing header"))?;
    let (termination, tokens, answer) = footer.ok_or_else(|| bad(0, "missing footer"))?;
    if tokens.len() != steps.len() || steps.iter().zip(&tokens).any(|(s, t)| s.token != *t) {
        return Err(bad(0, "footer tokens disagree with step records"));
    }
    Ok(Transcript {
        config,
        prompt,
        steps,
        termination,
        tokens,
        answer,
        inputs: Vec::new(),
    })
}

fn check_schema(line: usize, schema: &str) -> Result<()> {
    if schema == SCHEMA {
        Ok(())
    } else {
        Err(bad(line, format!("unsupported schema `{schema}`")))
    }
}
