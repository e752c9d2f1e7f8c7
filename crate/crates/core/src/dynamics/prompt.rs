//! Prompt template for LLM agents and parsing of their answers.

use std::fmt::Write;

use serde_json::Value;
use thiserror::Error;

use super::{AggregatedContext, UpdateResult};
use crate::llm::{ChatRequest, TransportError};
use crate::opinion::{AgentState, OpinionScale};

pub const SYSTEM_PROMPT: &str = "You role-play one member of an online community discussing a single topic. \
Stay in character and answer only in the requested JSON format.";

const CORE_HEADER: &str = "Core information";
const PERIPHERAL_HEADER: &str = "Peripheral information";
const OPINION_MARKER: &str = "opinion value ";

pub fn build_prompt(agent: &AgentState, ctx: &AggregatedContext, scale: &OpinionScale) -> String {
    let mut p = String::new();
    let persona = if agent.persona.trim().is_empty() { "an ordinary community member" } else { agent.persona.trim() };
    let _ = writeln!(p, "You are {} (id {}).", persona, agent.id);
    let _ = writeln!(
        p,
        "Your current stance: {} ({OPINION_MARKER}{:.2} on a scale from {} to {}).",
        scale.label(agent.category),
        agent.opinion,
        scale.min(),
        scale.max()
    );
    if !agent.message.trim().is_empty() {
        let _ = writeln!(p, "Your last message: {}", agent.message.trim());
    }
    p.push('\n');

    if ctx.is_empty() {
        p.push_str("No new messages reached you this round. Reaffirm your current stance unless you have your own reason to change it.\n\n");
    } else {
        let mut peripheral = 0;
        for (t, tier) in ctx.tiers.iter().enumerate() {
            if tier.is_empty() {
                continue;
            }
            if t == 0 {
                let _ = writeln!(p, "{CORE_HEADER} (the voices you trust most):");
            } else {
                peripheral += 1;
                let _ = writeln!(p, "{PERIPHERAL_HEADER} (group {peripheral}, lower priority):");
            }
            for e in tier {
                let _ = writeln!(p, "- [{}] ({}): {}", e.sender_id, scale.label(e.category), e.message.trim());
            }
            p.push('\n');
        }
        p.push_str(
            "Attention: base your revised stance mainly on the core information. \
Use peripheral information only as secondary context, and give less attention to each later group.\n\n",
        );
    }

    if !agent.recent_messages.is_empty() {
        p.push_str("Recent conversation you have seen:\n");
        for m in &agent.recent_messages {
            let _ = writeln!(p, "- {}", m.trim());
        }
        p.push('\n');
    }

    let labels: Vec<String> = scale.labels().iter().map(|l| format!("\"{l}\"")).collect();
    let _ = write!(
        p,
        "Reply with one JSON object and nothing else:\n\
{{\"opinion\": <number from {} to {}>, \"category\": <one of {}>, \"message\": \"<one or two sentences to your neighbors>\"}}\n",
        scale.min(),
        scale.max(),
        labels.join(", ")
    );
    p
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no JSON object in answer")]
    NoJson,
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("missing or non-numeric field {0:?}")]
    Missing(&'static str),
}

fn json_slice(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|x: &f64| x.is_finite())
}

/// Reads `{"opinion", "category", "message"}`. The stated category is ignored
/// in favor of the one implied by the (clamped) opinion.
pub fn parse_response(text: &str, scale: &OpinionScale) -> Result<UpdateResult, ParseError> {
    let body = json_slice(text).ok_or(ParseError::NoJson)?;
    let v: Value = serde_json::from_str(body).map_err(|e| ParseError::Json(e.to_string()))?;
    let opinion = v.get("opinion").and_then(number).ok_or(ParseError::Missing("opinion"))?;
    let message = v.get("message").and_then(Value::as_str).unwrap_or_default().trim().to_string();
    let mut r = UpdateResult::new(opinion, message, scale);
    r.new_stubbornness = v.get("stubbornness").and_then(number).filter(|s| (0.0..=1.0).contains(s));
    Ok(r)
}

fn label_midpoint(line: &str, scale: &OpinionScale) -> Option<f64> {
    let rest = line.strip_prefix("- [")?;
    let open = rest.find("] (")? + 3;
    let close = rest[open..].find(')')? + open;
    scale.category_by_label(&rest[open..close]).map(|c| scale.midpoint(c))
}

/// Offline stand-in for a chat model that understands [`build_prompt`]:
/// it moves the stated opinion 30% of the way toward the mean midpoint of
/// the quoted neighbors, counting core voices twice.
pub fn mock_responder(
    scale: OpinionScale,
) -> impl Fn(&ChatRequest) -> Result<String, TransportError> + Send + Sync + 'static {
    move |req: &ChatRequest| {
        let prompt = req.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        let x = prompt
            .find(OPINION_MARKER)
            .map(|i| &prompt[i + OPINION_MARKER.len()..])
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| TransportError::Malformed("prompt carries no opinion".into()))?;
        let (mut num, mut den) = (0.0, 0.0);
        let mut weight = 0.0;
        for line in prompt.lines() {
            if line.starts_with(CORE_HEADER) {
                weight = 2.0;
            } else if line.starts_with(PERIPHERAL_HEADER) {
                weight = 1.0;
            } else if line.is_empty() {
                weight = 0.0;
            } else if weight > 0.0 {
                if let Some(mid) = label_midpoint(line, &scale) {
                    num += weight * mid;
                    den += weight;
                }
            }
        }
        let next = if den > 0.0 { x + 0.3 * (num / den - x) } else { x };
        let next = scale.clamp(next);
        let label = scale.label(scale.categorize_clamped(next));
        Ok(serde_json::json!({
            "opinion": (next * 1e4).round() / 1e4,
            "category": label,
            "message": format!("Having heard my neighbors, I {label}."),
        })
        .to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ContextEntry;
    use crate::llm::ChatMessage;
    use crate::opinion::Category;

    fn entry(id: &str, cat: usize, msg: &str) -> ContextEntry {
        ContextEntry {
            sender: 0,
            sender_id: id.into(),
            message: msg.into(),
            category: Category(cat),
            opinion: 0.0,
            weight: 0.1,
        }
    }

    fn agent(scale: &OpinionScale) -> AgentState {
        AgentState::new("a7", 0.1, 0.4, scale).unwrap().with_persona("a retired teacher").with_message("Hmm.")
    }

    fn two_tier() -> AggregatedContext {
        AggregatedContext {
            tiers: vec![vec![entry("b", 4, "Great idea")], vec![entry("c", 0, "No way"), entry("d", 1, "Not sure")]],
            tier_weights: vec![0.4, 0.09],
            neighborhood_dist: vec![0.2; 5],
        }
    }

    #[test]
    fn sections_and_determinism() {
        let scale = OpinionScale::default();
        let p = build_prompt(&agent(&scale), &two_tier(), &scale);
        assert_eq!(p.matches(CORE_HEADER).count(), 1);
        assert_eq!(p.matches(PERIPHERAL_HEADER).count(), 1);
        assert!(p.contains("a retired teacher"));
        assert!(p.contains("\"opinion\""));
        assert!(!p.contains("0.4") && !p.contains("0.09"));
        assert_eq!(p, build_prompt(&agent(&scale), &two_tier(), &scale));
    }

    #[test]
    fn empty_context_asks_for_reaffirmation() {
        let scale = OpinionScale::default();
        let ctx = AggregatedContext { tiers: vec![vec![], vec![]], tier_weights: vec![0.0, 0.0], neighborhood_dist: vec![] };
        let p = build_prompt(&agent(&scale), &ctx, &scale);
        assert!(!p.contains(CORE_HEADER) && !p.contains(PERIPHERAL_HEADER));
        assert!(p.contains("Reaffirm"));
    }

    #[test]
    fn parse_examples() {
        let scale = OpinionScale::default();
        let r = parse_response(r#"{"opinion": 0.45, "category": "support", "message": "ok"}"#, &scale).unwrap();
        assert_eq!((r.new_opinion, r.category, r.new_message.as_str()), (0.45, Category(3), "ok"));

        let r = parse_response("```json\n{\"opinion\": 1.7, \"category\": \"neutral\", \"message\": \"!\"}\n```", &scale)
            .unwrap();
        assert_eq!(r.new_opinion, 1.0);
        assert_eq!(r.category, Category(4));

        assert_eq!(parse_response(r#"{"category": "support"}"#, &scale), Err(ParseError::Missing("opinion")));
        assert_eq!(parse_response("I refuse", &scale), Err(ParseError::NoJson));
        assert_eq!(parse_response(r#"{"opinion": "-0.2"}"#, &scale).unwrap().new_opinion, -0.2);
    }

    #[test]
    fn mock_round_trip() {
        let scale = OpinionScale::default();
        let respond = mock_responder(scale.clone());
        let prompt = build_prompt(&agent(&scale), &two_tier(), &scale);
        let req = ChatRequest {
            model: "mock".into(),
            messages: vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(prompt)],
            temperature: 0.7,
            max_output_tokens: 64,
            seed: None,
        };
        let text = respond(&req).unwrap();
        let r = parse_response(&text, &scale).unwrap();
        // target = (2*0.8 - 0.8 - 0.4) / 4 = 0.1, so the opinion stays at 0.1
        assert!((r.new_opinion - 0.1).abs() < 1e-9);
        assert_eq!(text, respond(&req).unwrap());
    }
}
