use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{FirstPass, PredState};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::corpus::BLANK;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Ranked n-best list, best first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FirstPassResult {
    pub hyps: Vec<Hypothesis>,
}

impl FirstPassResult {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }
}

fn rank(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Frame-by-frame argmax rollout. After `max_symbols_per_frame` labels on
/// one frame the search advances, still paying the blank log-prob.
pub fn greedy_decode(model: &FirstPass, store: &ParamStore, enc: &Tensor) -> Result<Hypothesis> {
    let tape = Tape::inference();
    let ej = model.project_encoder(&tape, store, tape.constant(enc.clone()))?;
    let mut state = model.initial_state(&tape, store)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for t in 0..enc.rows() {
        let row = ej.slice(0, t, 1)?;
        for emitted in 0..=model.config.max_symbols_per_frame {
            let lp = model.joint_step(&tape, store, row, &state)?;
            let k = argmax(&lp);
            if k == BLANK || emitted == model.config.max_symbols_per_frame {
                score += lp[BLANK];
                break;
            }
            score += lp[k];
            tokens.push(k);
            state = model.advance(&tape, store, k, state.lstm)?;
        }
    }
    Ok(Hypothesis { tokens, score })
}

#[derive(Clone)]
struct Beam<'t> {
    tokens: Vec<usize>,
    score: f64,
    state: PredState<'t>,
}

enum Cand {
    /// Already advanced past the current frame (index into `done`).
    Done(usize),
    /// Active beam `i` takes a blank.
    Blank(usize, f64),
    /// Active beam `i` emits a label.
    Emit(usize, usize, f64),
}

/// Time-synchronous beam search of a fixed width. Within a frame, blank and
/// label extensions of all active beams compete for the same `width` slots;
/// hypotheses with equal label sequences are merged keeping the better
/// score.
pub fn beam_search(model: &FirstPass, store: &ParamStore, enc: &Tensor, width: usize) -> Result<FirstPassResult> {
    if width == 0 {
        return Err(Error::invalid("rnnt_decode", "beam width must be positive"));
    }
    let tape = Tape::inference();
    let ej = model.project_encoder(&tape, store, tape.constant(enc.clone()))?;
    let max_sym = model.config.max_symbols_per_frame;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state(&tape, store)?,
    }];
    for t in 0..enc.rows() {
        let row: Var<'_> = ej.slice(0, t, 1)?;
        let mut done: Vec<Beam<'_>> = Vec::new();
        let mut active = beams;
        for round in 0..=max_sym {
            if active.is_empty() {
                break;
            }
            let mut cands: Vec<(f64, Cand)> = done.iter().enumerate().map(|(i, b)| (b.score, Cand::Done(i))).collect();
            for (i, b) in active.iter().enumerate() {
                let lp = model.joint_step(&tape, store, row, &b.state)?;
                cands.push((b.score + lp[BLANK], Cand::Blank(i, b.score + lp[BLANK])));
                if round < max_sym {
                    for (k, &l) in lp.iter().enumerate().skip(1) {
                        cands.push((b.score + l, Cand::Emit(i, k, b.score + l)));
                    }
                }
            }
            // stable ordering keeps the selection deterministic under ties
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));

            let mut next_done: Vec<Beam<'_>> = Vec::new();
            let mut done_index: HashMap<Vec<usize>, usize> = HashMap::new();
            let mut next_active: Vec<Beam<'_>> = Vec::new();
            let mut active_index: HashMap<Vec<usize>, usize> = HashMap::new();
            let mut kept = 0;
            for (_, c) in cands {
                if kept == width {
                    break;
                }
                let (tokens, score, is_done, src) = match c {
                    Cand::Done(i) => (done[i].tokens.clone(), done[i].score, true, None),
                    Cand::Blank(i, s) => (active[i].tokens.clone(), s, true, None),
                    Cand::Emit(i, k, s) => {
                        let mut tk = active[i].tokens.clone();
                        tk.push(k);
                        (tk, s, false, Some((i, k)))
                    }
                };
                let (index, pool) = if is_done {
                    (&mut done_index, &mut next_done)
                } else {
                    (&mut active_index, &mut next_active)
                };
                // candidates arrive best first, so a duplicate never wins
                if index.contains_key(&tokens) {
                    continue;
                }
                let state = match (c, src) {
                    (Cand::Done(i), _) => done[i].state,
                    (Cand::Blank(i, _), _) => active[i].state,
                    (_, Some((i, k))) => model.advance(&tape, store, k, active[i].state.lstm)?,
                    _ => unreachable!(),
                };
                index.insert(tokens.clone(), pool.len());
                pool.push(Beam { tokens, score, state });
                kept += 1;
            }
            done = next_done;
            active = next_active;
        }
        beams = done;
    }
    let mut hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|b| Hypothesis {
            tokens: b.tokens,
            score: b.score,
        })
        .collect();
    rank(&mut hyps);
    Ok(FirstPassResult { hyps })
}

/// Beam search whose n-best is the merged result of every width from 1 to
/// `beam`. Width 1 is the greedy rollout, and the top score can only grow
/// with `beam`.
pub fn rnnt_decode(model: &FirstPass, store: &ParamStore, enc: &Tensor, beam: usize) -> Result<FirstPassResult> {
    if beam == 0 {
        return Err(Error::invalid("rnnt_decode", "beam width must be positive"));
    }
    let mut best: HashMap<Vec<usize>, f64> = HashMap::new();
    for w in 1..=beam {
        for h in beam_search(model, store, enc, w)?.hyps {
            let e = best.entry(h.tokens).or_insert(f64::NEG_INFINITY);
            *e = e.max(h.score);
        }
    }
    let mut hyps: Vec<Hypothesis> = best.into_iter().map(|(tokens, score)| Hypothesis { tokens, score }).collect();
    rank(&mut hyps);
    hyps.truncate(beam);
    Ok(FirstPassResult { hyps })
}

/// Best-scoring label sequence over every alignment the search can reach
/// (at most `max_symbols_per_frame` labels per frame), by depth-first
/// enumeration. Exponential; for small oracles only.
pub fn exhaustive_decode(model: &FirstPass, store: &ParamStore, enc: &Tensor) -> Result<FirstPassResult> {
    let tape = Tape::inference();
    let ej = model.project_encoder(&tape, store, tape.constant(enc.clone()))?;
    let rows = (0..enc.rows()).map(|t| ej.slice(0, t, 1)).collect::<Result<Vec<_>>>()?;
    let mut best: HashMap<Vec<usize>, f64> = HashMap::new();

    struct Ctx<'a, 't> {
        model: &'a FirstPass,
        store: &'a ParamStore,
        tape: &'t Tape,
        rows: &'a [Var<'t>],
    }

    fn go<'t>(
        cx: &Ctx<'_, 't>,
        t: usize,
        emitted: usize,
        state: PredState<'t>,
        tokens: &mut Vec<usize>,
        score: f64,
        best: &mut HashMap<Vec<usize>, f64>,
    ) -> Result<()> {
        if t == cx.rows.len() {
            let e = best.entry(tokens.clone()).or_insert(f64::NEG_INFINITY);
            *e = e.max(score);
            return Ok(());
        }
        let lp = cx.model.joint_step(cx.tape, cx.store, cx.rows[t], &state)?;
        go(cx, t + 1, 0, state, tokens, score + lp[BLANK], best)?;
        if emitted < cx.model.config.max_symbols_per_frame {
            for (k, &l) in lp.iter().enumerate().skip(1) {
                let next = cx.model.advance(cx.tape, cx.store, k, state.lstm)?;
                tokens.push(k);
                go(cx, t, emitted + 1, next, tokens, score + l, best)?;
                tokens.pop();
            }
        }
        Ok(())
    }

    let cx = Ctx {
        model,
        store,
        tape: &tape,
        rows: &rows,
    };
    go(&cx, 0, 0, model.initial_state(&tape, store)?, &mut Vec::new(), 0.0, &mut best)?;
    let mut hyps: Vec<Hypothesis> = best.into_iter().map(|(tokens, score)| Hypothesis { tokens, score }).collect();
    rank(&mut hyps);
    Ok(FirstPassResult { hyps })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    pub tokens: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
}

/// One JSON object per utterance: id, n-best token lists and scores.
pub fn write_nbest_jsonl<W: Write>(out: &mut W, results: &[(String, FirstPassResult)]) -> Result<()> {
    for (id, r) in results {
        let rec = NBestRecord {
            id: id.clone(),
            tokens: r.hyps.iter().map(|h| h.tokens.clone()).collect(),
            scores: r.hyps.iter().map(|h| h.score).collect(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<n-best output>", e))?;
    }
    Ok(())
}
