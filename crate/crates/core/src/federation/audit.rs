//! Tab-separated round log and its consistency checker.
//!
//! Columns: `round  task  client  event  bytes  loss`. Rounds and tasks are
//! 1-based; `client` is `-` for server events. For `zg` events the `bytes`
//! column holds the number of global prototypes held at the start of the
//! round.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const AUDIT_HEADER: &str = "round\ttask\tclient\tevent\tbytes\tloss";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditEvent {
    /// Global prototype count at round start.
    Zg,
    /// Server broadcast size (per receiving client).
    Broadcast,
    Select,
    /// Selected client had no samples for the task and was replaced.
    Skip,
    /// Local training finished; loss is the last batch loss.
    Train,
    Upload,
}

impl fmt::Display for AuditEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuditEvent::Zg => "zg",
            AuditEvent::Broadcast => "broadcast",
            AuditEvent::Select => "select",
            AuditEvent::Skip => "skip",
            AuditEvent::Train => "train",
            AuditEvent::Upload => "upload",
        })
    }
}

impl FromStr for AuditEvent {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "zg" => AuditEvent::Zg,
            "broadcast" => AuditEvent::Broadcast,
            "select" => AuditEvent::Select,
            "skip" => AuditEvent::Skip,
            "train" => AuditEvent::Train,
            "upload" => AuditEvent::Upload,
            _ => return Err(format!("unknown event `{s}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRecord {
    pub round: usize,
    pub task: usize,
    pub client: Option<u32>,
    pub event: AuditEvent,
    pub bytes: u64,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn push(&mut self, round: usize, task: usize, client: Option<u32>, event: AuditEvent, bytes: u64, loss: Option<f64>) {
        self.records.push(AuditRecord {
            round,
            task,
            client,
            event,
            bytes,
            loss,
        });
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(AUDIT_HEADER);
        s.push('\n');
        for r in &self.records {
            let client = r.client.map_or("-".to_string(), |c| c.to_string());
            let loss = r.loss.map_or("-".to_string(), |l| format!("{l:.9}"));
            writeln!(s, "{}\t{}\t{client}\t{}\t{}\t{loss}", r.round, r.task, r.event, r.bytes).unwrap();
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(AUDIT_HEADER) {
            return Err(Error::Schema("audit log header does not match".into()));
        }
        let mut log = AuditLog::default();
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Parse { line: ln, msg: format!("{} fields, expected 6", f.len()) });
            }
            let bad = |what: &str| Error::Parse { line: ln, msg: format!("bad {what}") };
            log.records.push(AuditRecord {
                round: f[0].parse().map_err(|_| bad("round"))?,
                task: f[1].parse().map_err(|_| bad("task"))?,
                client: if f[2] == "-" { None } else { Some(f[2].parse().map_err(|_| bad("client"))?) },
                event: f[3].parse().map_err(|m: String| Error::Parse { line: ln, msg: m })?,
                bytes: f[4].parse().map_err(|_| bad("bytes"))?,
                loss: if f[5] == "-" { None } else { Some(f[5].parse().map_err(|_| bad("loss"))?) },
            });
        }
        Ok(log)
    }

    /// Uplink bytes per round, in round order.
    pub fn uplink_by_round(&self) -> Vec<(usize, u64)> {
        let mut out: Vec<(usize, u64)> = Vec::new();
        for r in self.records.iter().filter(|r| r.event == AuditEvent::Upload) {
            match out.last_mut() {
                Some((round, sum)) if *round == r.round => *sum += r.bytes,
                _ => out.push((r.round, r.bytes)),
            }
        }
        out
    }
}

/// What a well-formed log must show.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditExpectations {
    pub n_clients: usize,
    pub selected: usize,
    pub rounds: usize,
    pub rounds_per_task: usize,
    /// Prototypes are exchanged every round.
    pub prototypes_every_round: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditSummary {
    pub total_selections: usize,
    pub per_client: Vec<u64>,
    pub rounds_with_shortage: usize,
}

/// Checks participation counts against `participation` (final `ρ` per
/// client) and the per-task prototype lifecycle.
pub fn check_audit(log: &AuditLog, exp: &AuditExpectations, participation: &[u64]) -> Result<AuditSummary> {
    let fail = |msg: String| Err(Error::Protocol(msg));
    if participation.len() != exp.n_clients {
        return fail(format!("{} participation entries for {} clients", participation.len(), exp.n_clients));
    }
    let mut per_client = vec![0u64; exp.n_clients];
    let mut total = 0;
    let mut shortage = 0;
    for round in 1..=exp.rounds {
        let recs: Vec<&AuditRecord> = log.records.iter().filter(|r| r.round == round).collect();
        let task = (round - 1) / exp.rounds_per_task + 1;
        if recs.iter().any(|r| r.task != task) {
            return fail(format!("round {round} is logged under the wrong task"));
        }
        let count = |e: AuditEvent| recs.iter().filter(|r| r.event == e).count();
        let sel: Vec<u32> = recs
            .iter()
            .filter(|r| r.event == AuditEvent::Select)
            .map(|r| r.client.unwrap_or(u32::MAX))
            .collect();
        if sel.len() > exp.selected {
            return fail(format!("round {round}: {} selections, at most {}", sel.len(), exp.selected));
        }
        if sel.len() < exp.selected {
            if sel.len() + count(AuditEvent::Skip) != exp.n_clients {
                return fail(format!("round {round}: {} selections without exhausting the clients", sel.len()));
            }
            shortage += 1;
        }
        if count(AuditEvent::Train) != sel.len() || count(AuditEvent::Upload) != sel.len() {
            return fail(format!("round {round}: train/upload events do not match selections"));
        }
        for c in sel {
            let Some(slot) = per_client.get_mut(c as usize) else {
                return fail(format!("round {round}: unknown client {c}"));
            };
            *slot += 1;
            total += 1;
        }
        let zg: Vec<u64> = recs.iter().filter(|r| r.event == AuditEvent::Zg).map(|r| r.bytes).collect();
        let [zg] = zg[..] else {
            return fail(format!("round {round}: expected one zg event"));
        };
        let first_of_task = (round - 1) % exp.rounds_per_task == 0;
        if first_of_task && zg != 0 {
            return fail(format!("round {round}: global prototypes not reset at task start"));
        }
        if !first_of_task && exp.prototypes_every_round && zg == 0 {
            return fail(format!("round {round}: global prototypes still empty after the first round"));
        }
    }
    if log.records.iter().any(|r| r.round == 0 || r.round > exp.rounds) {
        return fail("records outside the configured rounds".into());
    }
    if shortage == 0 && total != exp.rounds * exp.selected {
        return fail(format!("{total} selections, expected R·L = {}", exp.rounds * exp.selected));
    }
    if per_client != participation {
        return fail(format!("participation {participation:?} disagrees with the log {per_client:?}"));
    }
    Ok(AuditSummary {
        total_selections: total,
        per_client,
        rounds_with_shortage: shortage,
    })
}
