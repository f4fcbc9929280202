//! Run-time controller: picks an operating point for the current latency
//! constraint and serves translations through the matching view.

use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::TokenId;
use crate::design_space::SubConfig;
use crate::error::{Error, Result};
use crate::model::{greedy_translate, inherit, SuperWeights};
use crate::search::{OperatingLibrary, OperatingPoint};

/// Index of the chosen point and whether the constraint was violated.
///
/// Among points measured within `constraint_ms` the lowest validation loss
/// wins, ties going to the faster point. With no such point the fastest one
/// is returned and flagged.
pub fn select_point(points: &[OperatingPoint], constraint_ms: f64) -> Result<(usize, bool)> {
    if points.is_empty() {
        return Err(Error::InvalidInput("operating library is empty".into()));
    }
    let feasible = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.measured_ms <= constraint_ms)
        .min_by(|(_, a), (_, b)| {
            a.val_loss
                .total_cmp(&b.val_loss)
                .then(a.measured_ms.total_cmp(&b.measured_ms))
        });
    match feasible {
        Some((i, _)) => Ok((i, false)),
        None => {
            let (i, _) = points
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.measured_ms.total_cmp(&b.measured_ms))
                .unwrap();
            Ok((i, true))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    /// Milliseconds since the controller started.
    pub timestamp_ms: f64,
    pub constraint_ms: f64,
    pub point: usize,
    pub config_hash: String,
    pub measured_ms: f64,
    pub switched: bool,
    pub switch_time_ms: f64,
    pub violation: bool,
}

struct Active {
    index: usize,
    config: SubConfig,
}

pub struct Controller {
    bank: Arc<SuperWeights>,
    points: Vec<OperatingPoint>,
    active: RwLock<Arc<Active>>,
    log: Mutex<Vec<ControlEvent>>,
    started: Instant,
}

impl Controller {
    /// Starts on the fastest point. Every point must fit the bank.
    pub fn new(bank: Arc<SuperWeights>, mut library: OperatingLibrary) -> Result<Self> {
        library.normalize();
        if library.is_empty() {
            return Err(Error::InvalidInput("operating library is empty".into()));
        }
        for p in &library.points {
            inherit(&bank, &p.config)?;
        }
        let first = Active {
            index: 0,
            config: library.points[0].config.clone(),
        };
        Ok(Self {
            bank,
            points: library.points,
            active: RwLock::new(Arc::new(first)),
            log: Mutex::new(Vec::new()),
            started: Instant::now(),
        })
    }

    pub fn points(&self) -> &[OperatingPoint] {
        &self.points
    }

    pub fn bank(&self) -> &Arc<SuperWeights> {
        &self.bank
    }

    pub fn active_index(&self) -> usize {
        self.active.read().unwrap().index
    }

    pub fn active_point(&self) -> &OperatingPoint {
        &self.points[self.active_index()]
    }

    /// Makes point `index` active and returns the wall-clock switch time in
    /// milliseconds. Requests already running keep their old view.
    pub fn switch_to(&self, index: usize) -> Result<f64> {
        let start = Instant::now();
        let point = self.points.get(index).ok_or_else(|| {
            Error::InvalidInput(format!("point {index} not in library of {}", self.points.len()))
        })?;
        inherit(&self.bank, &point.config)?;
        let next = Arc::new(Active {
            index,
            config: point.config.clone(),
        });
        *self.active.write().unwrap() = next;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }

    /// Switches to the library point with `point`'s config.
    pub fn switch_active(&self, point: &OperatingPoint) -> Result<f64> {
        let index = self
            .points
            .iter()
            .position(|p| p.config == point.config)
            .ok_or_else(|| Error::InvalidInput("point is not in the operating library".into()))?;
        self.switch_to(index)
    }

    /// Selects a point for `constraint_ms`, switches if it differs from the
    /// active one, and logs the event.
    pub fn handle_constraint_event(&self, constraint_ms: f64) -> Result<ControlEvent> {
        let (index, violation) = select_point(&self.points, constraint_ms)?;
        let switched = index != self.active_index();
        let switch_time_ms = if switched { self.switch_to(index)? } else { 0.0 };
        let p = &self.points[index];
        let event = ControlEvent {
            timestamp_ms: self.started.elapsed().as_secs_f64() * 1e3,
            constraint_ms,
            point: index,
            config_hash: p.config.config_hash(),
            measured_ms: p.measured_ms,
            switched,
            switch_time_ms,
            violation,
        };
        self.log.lock().unwrap().push(event.clone());
        Ok(event)
    }

    pub fn events(&self) -> Vec<ControlEvent> {
        self.log.lock().unwrap().clone()
    }

    /// Greedy translation through the active view.
    pub fn translate_current(&self, src_tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        let active = Arc::clone(&self.active.read().unwrap());
        let view = inherit(&self.bank, &active.config)?;
        greedy_translate(&view, src_tokens, default_max_len(src_tokens.len()))
    }
}

pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 4
}

/// Config hashes active after each event, starting from `initial`.
pub fn replay_active(initial: &str, events: &[ControlEvent]) -> Vec<String> {
    let mut current = initial.to_string();
    events
        .iter()
        .map(|e| {
            if e.switched {
                current = e.config_hash.clone();
            }
            current.clone()
        })
        .collect()
}

/// Serves line commands until `quit` or end of input:
/// `set-constraint <ms>`, `translate <ids...>`, `stats`, `quit`.
/// Every reply is one JSON line on `out`; events are also written to `log`.
pub fn serve(
    controller: &Controller,
    input: impl BufRead,
    mut out: impl Write,
    mut log: Option<&mut dyn Write>,
) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        let mut words = line.split_whitespace();
        let Some(cmd) = words.next() else { continue };
        let args: Vec<&str> = words.collect();
        let reply = match cmd {
            "quit" => break,
            "set-constraint" => match args.as_slice() {
                [ms] => match ms.parse::<f64>() {
                    Ok(ms) if ms.is_finite() => {
                        let e = controller.handle_constraint_event(ms)?;
                        if let Some(w) = log.as_deref_mut() {
                            serde_json::to_writer(&mut *w, &e)?;
                            w.write_all(b"\n")?;
                        }
                        serde_json::to_value(&e)?
                    }
                    _ => command_error("bad constraint", &line),
                },
                _ => command_error("usage: set-constraint <ms>", &line),
            },
            "translate" => match args.iter().map(|t| t.parse::<TokenId>()).collect::<std::result::Result<Vec<_>, _>>() {
                Ok(ids) => match controller.translate_current(&ids) {
                    Ok(tokens) => json!({ "tokens": tokens }),
                    Err(e) => json!({ "error": e.kind(), "message": e.to_string() }),
                },
                Err(_) => command_error("token ids must be non-negative integers", &line),
            },
            "stats" => {
                let events = controller.events();
                let p = controller.active_point();
                json!({
                    "active": controller.active_index(),
                    "config_hash": p.config.config_hash(),
                    "measured_ms": p.measured_ms,
                    "val_loss": p.val_loss,
                    "n_events": events.len(),
                    "n_switches": events.iter().filter(|e| e.switched).count(),
                    "n_violations": events.iter().filter(|e| e.violation).count(),
                })
            }
            _ => command_error("unknown command", &line),
        };
        serde_json::to_writer(&mut out, &reply)?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}

fn command_error(message: &str, line: &str) -> serde_json::Value {
    json!({ "error": "invalid_command", "message": message, "line": line })
}
