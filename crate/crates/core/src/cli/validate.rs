use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::action::{parse_turn, serialize_turn, Action};
use crate::backend::{decode_data_uri, ChatMessage, ImageRef, Role};
use crate::datagen::SftSample;
use crate::planner::{retrieval_label, SYSTEM_PROMPT};
use crate::trajectory::TrajectoryRecord;

use super::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CorpusKind {
    Auto,
    Trajectories,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub kind: CorpusKind,
    pub records: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for v in &self.violations {
            out.push_str(v);
            out.push('\n');
        }
        out.push_str(&format!(
            "{} records, {} violations\n",
            self.records,
            self.violations.len()
        ));
        out
    }
}

pub fn validate_path(path: &Path, kind: CorpusKind) -> Result<ValidationReport, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let kind = match kind {
        CorpusKind::Auto => detect(&text),
        k => k,
    };
    let mut report = ValidationReport {
        kind,
        records: 0,
        violations: Vec::new(),
    };
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let line_no = n + 1;
        match kind {
            CorpusKind::Sft => validate_sft_line(line, line_no, &mut report.violations),
            _ => validate_trajectory_line(line, line_no, base, &mut ids, &mut report.violations),
        }
    }
    Ok(report)
}

fn detect(text: &str) -> CorpusKind {
    let first = text.lines().find(|l| !l.trim().is_empty());
    match first.and_then(|l| serde_json::from_str::<Value>(l).ok()) {
        Some(v) if v.get("messages").is_some() => CorpusKind::Sft,
        _ => CorpusKind::Trajectories,
    }
}

fn image_dims(image: &ImageRef) -> Result<(u32, u32), String> {
    if image.is_data_uri() {
        let bytes = decode_data_uri(image.as_str()).ok_or("undecodable data URI")?;
        let img = image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
        return Ok((img.width(), img.height()));
    }
    let path = Path::new(image.as_str());
    if !path.exists() {
        return Err(format!("image {} does not exist", image.as_str()));
    }
    image::image_dimensions(path).map_err(|e| format!("image {}: {e}", image.as_str()))
}

fn validate_trajectory_line(
    line: &str,
    line_no: usize,
    base: &Path,
    ids: &mut HashSet<String>,
    out: &mut Vec<String>,
) {
    let record: TrajectoryRecord = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            out.push(format!("line {line_no}: {e}"));
            return;
        }
    };
    if !ids.insert(record.id.clone()) {
        out.push(format!("trajectory {}: duplicate id", record.id));
    }
    let traj = match record.into_trajectory(base) {
        Ok(t) => t,
        Err(vs) => {
            out.extend(vs.iter().map(ToString::to_string));
            return;
        }
    };
    for (k, a) in traj.actions.iter().enumerate() {
        if let Err(e) = a.validate_for_platform(traj.platform) {
            out.push(format!("trajectory {} step {k}: {e}", traj.id));
        }
    }
    for (k, obs) in traj.observations.iter().enumerate() {
        match image_dims(&obs.image) {
            Ok((w, h)) if (w, h) != (obs.width, obs.height) => out.push(format!(
                "trajectory {} step {k}: image is {w}x{h} but the record says {}x{}",
                traj.id, obs.width, obs.height
            )),
            Ok(_) => {}
            Err(e) => out.push(format!("trajectory {} step {k}: {e}", traj.id)),
        }
    }
}

fn check_turn(msg: &ChatMessage) -> Result<Action, String> {
    let text = msg.text_content();
    let turn = parse_turn(&text).map_err(|e| format!("malformed assistant turn: {e}"))?;
    if serialize_turn(&turn) != text {
        return Err("assistant turn is not in canonical form".into());
    }
    Ok(turn.call)
}

fn validate_sft_line(line: &str, line_no: usize, out: &mut Vec<String>) {
    let sample: SftSample = match serde_json::from_str(line) {
        Ok(s) => s,
        Err(e) => {
            out.push(format!("line {line_no}: {e}"));
            return;
        }
    };
    let at = format!("trajectory {} step {}", sample.trajectory_id, sample.step);
    let mut bad = |msg: String| out.push(format!("{at}: {msg}"));
    if sample.id != format!("{}#{}", sample.trajectory_id, sample.step) {
        bad(format!(
            "sample id {} does not match its trajectory and step",
            sample.id
        ));
    }
    let m = &sample.messages;
    let roles: Vec<Role> = m.iter().map(|x| x.role).collect();
    let expected_roles: &[Role] = match m.len() {
        3 => &[Role::System, Role::User, Role::Assistant],
        5 => &[
            Role::System,
            Role::User,
            Role::Assistant,
            Role::Tool,
            Role::Assistant,
        ],
        n => {
            bad(format!("expected 3 or 5 messages, found {n}"));
            return;
        }
    };
    if roles != expected_roles {
        bad(format!("unexpected role sequence {roles:?}"));
        return;
    }
    if m[0].text_content() != SYSTEM_PROMPT {
        bad("system prompt differs from the planner prompt".into());
    }
    for msg in m {
        for img in msg.images() {
            if let Err(e) = image_dims(img) {
                bad(e);
            }
        }
    }
    let first = match check_turn(&m[2]) {
        Ok(a) => a,
        Err(e) => {
            bad(e);
            return;
        }
    };
    if m.len() == 3 {
        if first.is_retrieve() {
            bad("single-turn sample ends in a retrieve call".into());
        }
        if sample.labels.used_retrieval || sample.labels.retrieval_distance.is_some() {
            bad("labels claim a retrieval the dialogue does not contain".into());
        }
        return;
    }
    let Action::Retrieve { step: j } = first else {
        bad("first assistant turn of a retrieval sample is not a retrieve call".into());
        return;
    };
    if j >= sample.step {
        bad(format!(
            "retrieved step {j} is not before step {}",
            sample.step
        ));
    }
    if m[3].text_content() != retrieval_label(j) || m[3].images().count() != 1 {
        bad("tool turn does not carry the retrieved screenshot".into());
    }
    match check_turn(&m[4]) {
        Ok(a) if a.is_retrieve() => bad("final assistant turn is a retrieve call".into()),
        Ok(_) => {}
        Err(e) => bad(e),
    }
    if !sample.labels.used_retrieval
        || sample.labels.retrieval_distance != Some(sample.step.saturating_sub(j))
    {
        bad("labels disagree with the retrieval in the dialogue".into());
    }
}
