use super::forward::{argmax, hidden_states, lm_logits, regress, Bound};
use super::ModelParams;
use crate::codec::{TokenId, EOS, IMG_END, IMG_START};
use crate::error::Result;
use crate::kernel::{Tape, Tensor};
use crate::seqpack::{PackedSequence, Segment, QUERY_SLOTS};

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Token(TokenId),
    /// Regressed `[64 × d_v]` features for a generated image.
    ImageFeatures(Tensor),
}

/// Greedy decoding. Emitting `IMG_START` appends the 64 query slots,
/// yields their regressed features, then appends `IMG_END` without
/// counting it as a generated token. Stops after `max_new` token events,
/// at `EOS`, or when the context is full.
pub fn generate(params: &ModelParams, prompt: &PackedSequence, max_new: usize) -> Result<Vec<Event>> {
    let cfg = &params.config;
    let mut seq = prompt.clone();
    let mut events = Vec::new();
    let mut emitted = 0;
    while emitted < max_new && seq.total_len() < cfg.max_len {
        let mut t = Tape::new();
        let b = Bound::new(params, &mut t, &|_| false);
        let h = hidden_states(&mut t, &b, cfg, &seq)?;
        let last = t.slice_rows(h, seq.total_len() - 1, 1)?;
        let logits = lm_logits(&mut t, &b, last)?;
        let next = argmax(t.value(logits).data()) as TokenId;
        events.push(Event::Token(next));
        emitted += 1;
        seq.push_tokens(&[next]);
        if next == EOS {
            break;
        }
        if next == IMG_START {
            if seq.total_len() + QUERY_SLOTS + 1 > cfg.max_len {
                break;
            }
            let start = seq.total_len();
            seq.segments.push(Segment::Query { slots: QUERY_SLOTS });
            let mut t = Tape::new();
            let b = Bound::new(params, &mut t, &|_| false);
            let h = hidden_states(&mut t, &b, cfg, &seq)?;
            let hq = t.slice_rows(h, start, QUERY_SLOTS)?;
            let r = regress(&mut t, &b, hq)?;
            events.push(Event::ImageFeatures(t.value(r).clone()));
            seq.segments.push(Segment::Tokens(vec![IMG_END]));
        }
    }
    Ok(events)
}

/// Generated token ids; image events dropped.
pub fn event_tokens(events: &[Event]) -> Vec<TokenId> {
    events
        .iter()
        .filter_map(|e| match e {
            Event::Token(t) => Some(*t),
            Event::ImageFeatures(_) => None,
        })
        .collect()
}
