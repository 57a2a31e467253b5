//! Three-level summarization escalation.
//!
//! Level 1 asks the model for a detail-preserving summary within a target
//! budget, level 2 for terse bullet points within half of it, and level 3
//! truncates deterministically to [`TRUNCATE_BUDGET`] tokens without any
//! model call. The first level whose output is strictly smaller than the
//! input wins; since inputs are always larger than the level-3 budget, the
//! result is a strict reduction no matter what the model returns.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use tracing::debug;

use lcm_model::Level;

use crate::error::{LcmError, Result};
use crate::provider::{ChatMessage, CompletionRequest, Provider};
use crate::tokenizer::Tokenizer;

/// Output budget of the deterministic fallback.
pub const TRUNCATE_BUDGET: u64 = 512;
/// Smallest input the escalation accepts: one more than [`TRUNCATE_BUDGET`].
pub const MIN_COMPACTABLE_TOKENS: u64 = TRUNCATE_BUDGET + 1;
/// Floor of the default level-1 target.
pub const MIN_TARGET_TOKENS: u64 = 256;

const ITEM_SEPARATOR: &str = "\n\n";
const HEAD_SHARE_PERCENT: u64 = 75;

/// Default level-1 target for an input: 10% of it, at least
/// [`MIN_TARGET_TOKENS`].
pub fn default_target(input_tokens: u64) -> u64 {
    (input_tokens / 10).max(MIN_TARGET_TOKENS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscalationRequest {
    items: Vec<String>,
    target_tokens: u64,
    input_tokens: u64,
}

impl EscalationRequest {
    /// Rejects empty requests and inputs of [`TRUNCATE_BUDGET`] tokens or less.
    pub fn new(items: Vec<String>, target_tokens: u64, tokenizer: &dyn Tokenizer) -> Result<Self> {
        if items.is_empty() {
            return Err(LcmError::Invalid("nothing to summarize".into()));
        }
        if target_tokens == 0 {
            return Err(LcmError::Invalid("target_tokens must be positive".into()));
        }
        let input_tokens = combined_tokens(&items, tokenizer);
        if input_tokens < MIN_COMPACTABLE_TOKENS {
            return Err(LcmError::Invalid(format!(
                "blocks of {input_tokens} tokens are below the {MIN_COMPACTABLE_TOKENS}-token minimum"
            )));
        }
        Ok(Self {
            items,
            target_tokens,
            input_tokens,
        })
    }

    /// Like [`EscalationRequest::new`] with the default target.
    pub fn with_default_target(items: Vec<String>, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let t = default_target(combined_tokens(&items, tokenizer));
        Self::new(items, t, tokenizer)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn target_tokens(&self) -> u64 {
        self.target_tokens
    }

    /// Sum of the items' token counts.
    pub fn input_tokens(&self) -> u64 {
        self.input_tokens
    }
}

/// Sum of per-item token counts. This is the measure strict reduction is
/// checked against, and it matches how the active context adds up entries.
pub fn combined_tokens(items: &[String], tokenizer: &dyn Tokenizer) -> u64 {
    items.iter().map(|i| tokenizer.count(i).0).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EscalationResult {
    pub text: String,
    pub token_count: u64,
    pub level_used: Level,
    pub provider_calls: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub preserve_details: String,
    pub bullet_points: String,
    pub explore_text: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        serde_json::from_str(include_str!("../resources/prompts.json"))
            .expect("packaged prompt templates parse")
    }
}

impl PromptTemplates {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LcmError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn render(template: &str, target: u64) -> String {
        template.replace("{target}", &target.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Summarizer {
    tokenizer: Arc<dyn Tokenizer>,
    templates: PromptTemplates,
}

impl Summarizer {
    pub fn new(tokenizer: Arc<dyn Tokenizer>) -> Self {
        Self {
            tokenizer,
            templates: PromptTemplates::default(),
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    /// Runs the escalation. Never fails: provider errors count as a failed
    /// level.
    pub async fn escalated_summary(
        &self,
        request: &EscalationRequest,
        provider: &dyn Provider,
    ) -> EscalationResult {
        let input = request.input_tokens;
        let content = request.items.join(ITEM_SEPARATOR);
        let levels = [
            (Level::Normal, "preserve_details", &self.templates.preserve_details, request.target_tokens),
            (
                Level::Aggressive,
                "bullet_points",
                &self.templates.bullet_points,
                (request.target_tokens / 2).max(1),
            ),
        ];
        let mut calls = 0;
        for (level, mode, template, budget) in levels {
            calls += 1;
            let req = CompletionRequest::new(
                mode,
                vec![
                    ChatMessage::new("system", PromptTemplates::render(template, budget)),
                    ChatMessage::new("user", content.clone()),
                ],
                budget,
            );
            match provider.complete(req).await {
                Ok(done) => {
                    let tokens = self.tokenizer.count(&done.text).0;
                    if tokens < input {
                        return EscalationResult {
                            text: done.text,
                            token_count: tokens,
                            level_used: level,
                            provider_calls: calls,
                        };
                    }
                    debug!(?level, tokens, input, "summary did not shrink its input; escalating");
                }
                Err(e) => debug!(?level, error = %e, "summarization call failed; escalating"),
            }
        }
        let text = deterministic_truncate(&request.items, TRUNCATE_BUDGET, self.tokenizer.as_ref());
        EscalationResult {
            token_count: self.tokenizer.count(&text).0,
            text,
            level_used: Level::Truncate,
            provider_calls: calls,
        }
    }
}

/// Joins `items` and, if the result exceeds `budget_tokens`, keeps a head
/// and a tail excerpt (3:1) around an elision marker. The output never
/// exceeds the budget and depends only on the inputs.
pub fn deterministic_truncate(items: &[String], budget_tokens: u64, tokenizer: &dyn Tokenizer) -> String {
    let joined = items.join(ITEM_SEPARATOR);
    let total = tokenizer.count(&joined).0;
    if total <= budget_tokens {
        return joined;
    }
    let marker_for = |elided: u64| format!("\n[... {elided} tokens elided ...]\n");
    let mut available = budget_tokens.saturating_sub(tokenizer.count(&marker_for(total)).0);
    loop {
        if available == 0 {
            // The budget cannot even hold the marker; keep the head only.
            let cut = tokenizer.prefix_within(&joined, budget_tokens);
            return joined[..cut].to_string();
        }
        let head_budget = available * HEAD_SHARE_PERCENT / 100;
        let tail_budget = available - head_budget;
        let head_end = tokenizer.prefix_within(&joined, head_budget);
        let tail_start = tokenizer
            .suffix_within(&joined, tail_budget)
            .max(head_end);
        let elided = tokenizer.count(&joined[head_end..tail_start]).0;
        let out = format!(
            "{}{}{}",
            &joined[..head_end],
            marker_for(elided),
            &joined[tail_start..]
        );
        if tokenizer.count(&out).0 <= budget_tokens {
            return out;
        }
        available -= 1;
    }
}
