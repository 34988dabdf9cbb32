//! Loading spatial interaction network data.
//!
//! Two sources are supported: a generic CSV with one row per primitive object
//! and open-data soccer event files (completed passes only).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 7] = [
    "replicate_id",
    "y",
    "t",
    "x_origin",
    "y_origin",
    "x_dest",
    "y_dest",
];

/// One spatially located interaction (a pass).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveObject {
    pub origin: [f64; 2],
    pub destination: [f64; 2],
    pub replicate_index: usize,
}

impl PrimitiveObject {
    /// Concatenated `(origin, destination)` point used for similarity search.
    pub fn as_point(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.destination[0],
            self.destination[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub id: String,
    pub response: f64,
    pub exposure: f64,
    pub po_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinDataset {
    pub label: String,
    pub pos: Vec<PrimitiveObject>,
    pub replicates: Vec<Replicate>,
}

impl SpinDataset {
    pub fn num_pos(&self) -> usize {
        self.pos.len()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.response).collect()
    }

    pub fn exposures(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.exposure).collect()
    }

    pub fn points(&self) -> Vec<[f64; 4]> {
        self.pos.iter().map(PrimitiveObject::as_point).collect()
    }

    /// Checks that every primitive object belongs to exactly one replicate
    /// and that exposures are positive.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![usize::MAX; self.pos.len()];
        for (i, rep) in self.replicates.iter().enumerate() {
            if !(rep.exposure > 0.0) || !rep.exposure.is_finite() {
                return Err(Error::arg(format!(
                    "replicate `{}` has non-positive exposure {}",
                    rep.id, rep.exposure
                )));
            }
            for &k in &rep.po_indices {
                if k >= self.pos.len() || owner[k] != usize::MAX {
                    return Err(Error::arg(format!(
                        "primitive object {k} is out of range or owned twice"
                    )));
                }
                owner[k] = i;
            }
        }
        for (k, po) in self.pos.iter().enumerate() {
            if owner[k] != po.replicate_index {
                return Err(Error::arg(format!(
                    "primitive object {k} is not listed by its replicate"
                )));
            }
        }
        Ok(())
    }
}

/// Reads the generic CSV format. Rows sharing a `replicate_id` form one
/// replicate, in order of first appearance. A row whose four coordinates are
/// all blank declares a replicate without adding a primitive object. A blank
/// `t` means exposure 1.
pub fn parse_spin_csv(path: impl AsRef<Path>) -> Result<SpinDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_spin_csv(BufReader::new(file), label)
}

pub fn read_spin_csv<R: std::io::Read>(reader: R, label: String) -> Result<SpinDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut col = [0usize; 7];
    for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut dataset = SpinDataset {
        label,
        pos: Vec::new(),
        replicates: Vec::new(),
    };
    let mut index: BTreeMap<String, usize> = BTreeMap::new();

    for (r, record) in rdr.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            message: e.to_string(),
        })?;
        let field = |c: usize| record.get(col[c]).unwrap_or("");
        let number = |c: usize| -> Result<f64> {
            let text = field(c);
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("column `{}` is not a number: `{text}`", CSV_COLUMNS[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    message: format!("column `{}` is not finite", CSV_COLUMNS[c]),
                });
            }
            Ok(v)
        };

        let id = field(0).to_string();
        let y = number(1)?;
        let t = if field(2).is_empty() { 1.0 } else { number(2)? };
        if t <= 0.0 {
            return Err(Error::Parse {
                row: line,
                message: format!("exposure must be positive, got {t}"),
            });
        }

        let i = match index.get(&id) {
            Some(&i) => {
                let rep = &dataset.replicates[i];
                if rep.response.to_bits() != y.to_bits() {
                    return Err(Error::Inconsistent {
                        replicate: id,
                        field: "y",
                    });
                }
                if rep.exposure.to_bits() != t.to_bits() {
                    return Err(Error::Inconsistent {
                        replicate: id,
                        field: "t",
                    });
                }
                i
            }
            None => {
                let i = dataset.replicates.len();
                index.insert(id.clone(), i);
                dataset.replicates.push(Replicate {
                    id,
                    response: y,
                    exposure: t,
                    po_indices: Vec::new(),
                });
                i
            }
        };

        if (3..7).all(|c| field(c).is_empty()) {
            continue;
        }
        let po = PrimitiveObject {
            origin: [number(3)?, number(4)?],
            destination: [number(5)?, number(6)?],
            replicate_index: i,
        };
        dataset.replicates[i].po_indices.push(dataset.pos.len());
        dataset.pos.push(po);
    }
    Ok(dataset)
}

/// Writes the generic CSV format. Numbers use the shortest representation
/// that parses back to the same `f64`.
pub fn write_spin_csv(dataset: &SpinDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_spin_csv_to(dataset, &mut w).map_err(|e| Error::io(path, e))
}

pub fn write_spin_csv_to<W: Write>(dataset: &SpinDataset, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for rep in &dataset.replicates {
        if rep.po_indices.is_empty() {
            writeln!(w, "{},{},{},,,,", rep.id, rep.response, rep.exposure)?;
        }
        for &k in &rep.po_indices {
            let po = &dataset.pos[k];
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                rep.id,
                rep.response,
                rep.exposure,
                po.origin[0],
                po.origin[1],
                po.destination[0],
                po.destination[1]
            )?;
        }
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// Soccer event data

/// A completed pass extracted from an event file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub team: String,
    pub minute: u32,
    pub period: u8,
    pub origin: [f64; 2],
    pub destination: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedEvents {
    pub passes: Vec<PassRecord>,
    /// Completed passes dropped for lacking a location or end location.
    pub skipped: usize,
    /// Largest minute observed in each period, over all events.
    pub period_end_minute: BTreeMap<u8, u32>,
}

#[derive(Deserialize)]
struct Named {
    #[serde(default)]
    name: Option<String>,
}

#[derive(Deserialize)]
struct RawPass {
    #[serde(default)]
    end_location: Option<Vec<f64>>,
    #[serde(default)]
    outcome: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct RawEvent {
    #[serde(rename = "type", default)]
    kind: Option<Named>,
    #[serde(default)]
    team: Option<Named>,
    #[serde(default)]
    minute: Option<u32>,
    #[serde(default)]
    period: Option<u8>,
    #[serde(default)]
    location: Option<Vec<f64>>,
    #[serde(default)]
    pass: Option<RawPass>,
}

fn pair(v: &Option<Vec<f64>>) -> Option<[f64; 2]> {
    match v.as_deref() {
        Some([x, y, ..]) if x.is_finite() && y.is_finite() => Some([*x, *y]),
        _ => None,
    }
}

/// Completed passes (type "Pass" with no outcome) from an event array.
pub fn parse_event_json(path: impl AsRef<Path>) -> Result<ParsedEvents> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let events: Vec<RawEvent> = serde_json::from_reader(BufReader::new(file))?;
    Ok(extract_passes(events))
}

pub fn parse_event_str(text: &str) -> Result<ParsedEvents> {
    let events: Vec<RawEvent> = serde_json::from_str(text)?;
    Ok(extract_passes(events))
}

fn extract_passes(events: Vec<RawEvent>) -> ParsedEvents {
    let mut out = ParsedEvents::default();
    for ev in events {
        let period = ev.period.unwrap_or(1);
        let minute = ev.minute.unwrap_or(0);
        let end = out.period_end_minute.entry(period).or_insert(0);
        *end = (*end).max(minute);

        let is_pass = ev
            .kind
            .as_ref()
            .and_then(|k| k.name.as_deref())
            .is_some_and(|n| n == "Pass");
        let Some(pass) = ev.pass.filter(|_| is_pass) else {
            continue;
        };
        if pass.outcome.is_some() {
            continue;
        }
        match (pair(&ev.location), pair(&pass.end_location)) {
            (Some(origin), Some(destination)) => out.passes.push(PassRecord {
                team: ev.team.and_then(|t| t.name).unwrap_or_default(),
                minute,
                period,
                origin,
                destination,
            }),
            _ => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} completed passes without coordinates", out.skipped);
    }
    out
}

/// Match metadata needed to build task responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchInfo {
    pub match_id: String,
    pub home_team: String,
    pub away_team: String,
    pub home_score: Option<i64>,
    pub away_score: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPasses {
    pub info: MatchInfo,
    pub events: ParsedEvents,
}

#[derive(Deserialize)]
struct RawMatch {
    match_id: serde_json::Value,
    home_team: serde_json::Value,
    away_team: serde_json::Value,
    #[serde(default)]
    home_score: Option<i64>,
    #[serde(default)]
    away_score: Option<i64>,
}

fn team_name(v: &serde_json::Value, key: &str) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Object(map) => map
            .get(key)
            .or_else(|| map.get("name"))
            .and_then(|n| n.as_str())
            .unwrap_or_default()
            .to_string(),
        _ => String::new(),
    }
}

/// Parses a matches listing (array of match objects with team names and scores).
pub fn parse_matches_json(path: impl AsRef<Path>) -> Result<Vec<MatchInfo>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<RawMatch> = serde_json::from_reader(BufReader::new(file))?;
    Ok(raw
        .into_iter()
        .map(|m| MatchInfo {
            match_id: match &m.match_id {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            },
            home_team: team_name(&m.home_team, "home_team_name"),
            away_team: team_name(&m.away_team, "away_team_name"),
            home_score: m.home_score,
            away_score: m.away_score,
        })
        .collect())
}

/// Loads every match in `matches_json` with its events from
/// `events_dir/<match_id>.json`.
pub fn load_matches(matches_json: impl AsRef<Path>, events_dir: impl AsRef<Path>) -> Result<Vec<MatchPasses>> {
    let infos = parse_matches_json(matches_json)?;
    infos
        .into_iter()
        .map(|info| {
            let events = parse_event_json(events_dir.as_ref().join(format!("{}.json", info.match_id)))?;
            Ok(MatchPasses { info, events })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GoalDifference,
    GamePhase,
}

const PERIOD_START: [u32; 4] = [0, 45, 90, 105];

/// Played intervals `[start, end)` in match minutes, one per regular or
/// extra-time period, from the largest observed minute of each period.
fn played_intervals(events: &ParsedEvents) -> Vec<(u32, u32)> {
    events
        .period_end_minute
        .iter()
        .filter(|(&p, _)| (1..=4).contains(&p))
        .map(|(&p, &end)| {
            let start = PERIOD_START[p as usize - 1];
            (start, end.max(start))
        })
        .collect()
}

/// Builds one replicate per (match, team) for `GoalDifference`, or two per
/// (match, team) split at `phase_cut_minute` for `GamePhase`. Exposures are
/// played minutes divided by 90.
pub fn build_task_replicates(
    matches: &[MatchPasses],
    task: Task,
    phase_cut_minute: u32,
) -> Result<SpinDataset> {
    if phase_cut_minute == 0 || phase_cut_minute >= 120 {
        return Err(Error::arg(format!(
            "phase cut minute must lie in (0, 120), got {phase_cut_minute}"
        )));
    }
    let mut ds = SpinDataset {
        label: match task {
            Task::GoalDifference => "goal_difference".into(),
            Task::GamePhase => "game_phase".into(),
        },
        pos: Vec::new(),
        replicates: Vec::new(),
    };

    for mp in matches {
        let info = &mp.info;
        let intervals = played_intervals(&mp.events);
        let total: u32 = intervals.iter().map(|(s, e)| e - s).sum();
        let early: u32 = intervals
            .iter()
            .map(|&(s, e)| e.min(phase_cut_minute).saturating_sub(s))
            .sum();
        let late = total - early;

        let teams = [
            (&info.home_team, info.home_score, info.away_score),
            (&info.away_team, info.away_score, info.home_score),
        ];
        for (team, own, other) in teams {
            let passes = mp.events.passes.iter().filter(|p| &p.team == team);
            match task {
                Task::GoalDifference => {
                    let (Some(own), Some(other)) = (own, other) else {
                        return Err(Error::MissingScore(info.match_id.clone()));
                    };
                    if total == 0 {
                        return Err(Error::arg(format!("match `{}` has no played minutes", info.match_id)));
                    }
                    let i = ds.replicates.len();
                    let mut rep = Replicate {
                        id: format!("{}:{}", info.match_id, team),
                        response: (own - other) as f64,
                        exposure: total as f64 / 90.0,
                        po_indices: Vec::new(),
                    };
                    for p in passes {
                        rep.po_indices.push(ds.pos.len());
                        ds.pos.push(PrimitiveObject {
                            origin: p.origin,
                            destination: p.destination,
                            replicate_index: i,
                        });
                    }
                    ds.replicates.push(rep);
                }
                Task::GamePhase => {
                    if early == 0 || late == 0 {
                        return Err(Error::arg(format!(
                            "match `{}` has an empty phase at cut minute {phase_cut_minute}",
                            info.match_id
                        )));
                    }
                    let i = ds.replicates.len();
                    let mut reps = [
                        Replicate {
                            id: format!("{}:{}:early", info.match_id, team),
                            response: 0.0,
                            exposure: early as f64 / 90.0,
                            po_indices: Vec::new(),
                        },
                        Replicate {
                            id: format!("{}:{}:late", info.match_id, team),
                            response: 1.0,
                            exposure: late as f64 / 90.0,
                            po_indices: Vec::new(),
                        },
                    ];
                    for p in passes {
                        let phase = usize::from(p.minute >= phase_cut_minute);
                        reps[phase].po_indices.push(ds.pos.len());
                        ds.pos.push(PrimitiveObject {
                            origin: p.origin,
                            destination: p.destination,
                            replicate_index: i + phase,
                        });
                    }
                    ds.replicates.extend(reps);
                }
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<SpinDataset> {
        read_spin_csv(text.as_bytes(), "t".into())
    }

    const HEADER: &str = "replicate_id,y,t,x_origin,y_origin,x_dest,y_dest\n";

    #[test]
    fn groups_rows_by_replicate() {
        let ds = read(&format!("{HEADER}A,3,1.5,1,2,3,4\nA,3,1.5,5,6,7,8\n")).unwrap();
        assert_eq!(ds.replicates.len(), 1);
        assert_eq!(ds.pos.len(), 2);
        assert_eq!(ds.replicates[0].response, 3.0);
        assert_eq!(ds.replicates[0].exposure, 1.5);
        ds.validate().unwrap();
    }

    #[test]
    fn empty_body() {
        let ds = read(HEADER).unwrap();
        assert!(ds.replicates.is_empty());
        assert!(ds.pos.is_empty());
    }

    #[test]
    fn inconsistent_response() {
        let err = read(&format!("{HEADER}A,3,1,1,2,3,4\nA,4,1,1,2,3,4\n")).unwrap_err();
        assert!(matches!(err, Error::Inconsistent { ref replicate, field: "y" } if replicate == "A"));
    }

    #[test]
    fn missing_column_is_named() {
        let err = read("replicate_id,y,t,x_origin,y_origin,x_dest\nA,1,1,1,1,1\n").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "y_dest"));
    }

    #[test]
    fn non_finite_coordinate_reports_row() {
        let err = read(&format!("{HEADER}A,1,1,1,1,1,1\nA,1,1,inf,1,1,1\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
    }

    #[test]
    fn blank_exposure_defaults_to_one() {
        let ds = read(&format!("{HEADER}A,2,,1,1,1,1\n")).unwrap();
        assert_eq!(ds.replicates[0].exposure, 1.0);
    }

    #[test]
    fn empty_replicate_row() {
        let ds = read(&format!("{HEADER}A,2,1,,,,\nB,0,2,1,1,1,1\n")).unwrap();
        assert_eq!(ds.replicates.len(), 2);
        assert!(ds.replicates[0].po_indices.is_empty());
        assert_eq!(ds.pos.len(), 1);
    }

    fn pass(team: &str, minute: u32, outcome: Option<&str>) -> String {
        let outcome = outcome
            .map(|o| format!(r#","outcome":{{"id":9,"name":"{o}"}}"#))
            .unwrap_or_default();
        format!(
            r#"{{"type":{{"id":30,"name":"Pass"}},"team":{{"name":"{team}"}},"minute":{minute},"period":{},"location":[10.5,20.0],"pass":{{"end_location":[30.0,40.25]{outcome}}}}}"#,
            if minute < 45 { 1 } else { 2 }
        )
    }

    #[test]
    fn completed_pass_passthrough() {
        let ev = parse_event_str(&format!("[{}]", pass("France", 3, None))).unwrap();
        assert_eq!(ev.passes.len(), 1);
        assert_eq!(ev.passes[0].origin, [10.5, 20.0]);
        assert_eq!(ev.passes[0].destination, [30.0, 40.25]);
        assert_eq!(ev.passes[0].team, "France");
    }

    #[test]
    fn incomplete_pass_filtered() {
        let ev = parse_event_str(&format!("[{}]", pass("France", 3, Some("Incomplete")))).unwrap();
        assert!(ev.passes.is_empty());
    }

    #[test]
    fn type_filter() {
        let shot = r#"{"type":{"name":"Shot"},"team":{"name":"France"},"minute":5,"period":1,"location":[100,40]}"#;
        let text = format!("[{},{},{}]", pass("France", 1, None), shot, pass("Croatia", 2, None));
        assert_eq!(parse_event_str(&text).unwrap().passes.len(), 2);
    }

    #[test]
    fn missing_location_is_skipped_not_error() {
        let text = r#"[{"type":{"name":"Pass"},"minute":1,"period":1,"pass":{"end_location":[1,2]}}]"#;
        let ev = parse_event_str(text).unwrap();
        assert!(ev.passes.is_empty());
        assert_eq!(ev.skipped, 1);
    }

    #[test]
    fn malformed_json_is_error() {
        assert!(matches!(parse_event_str("[{"), Err(Error::Json(_))));
    }

    fn final_match() -> MatchPasses {
        let mut events: Vec<String> = vec![
            pass("France", 10, None),
            pass("Croatia", 30, None),
            pass("France", 75, None),
            pass("France", 80, Some("Out")),
        ];
        events.push(r#"{"type":{"name":"Half End"},"minute":45,"period":1}"#.into());
        events.push(r#"{"type":{"name":"Half End"},"minute":90,"period":2}"#.into());
        MatchPasses {
            info: MatchInfo {
                match_id: "8658".into(),
                home_team: "France".into(),
                away_team: "Croatia".into(),
                home_score: Some(4),
                away_score: Some(2),
            },
            events: parse_event_str(&format!("[{}]", events.join(","))).unwrap(),
        }
    }

    #[test]
    fn goal_difference_task() {
        let ds = build_task_replicates(&[final_match()], Task::GoalDifference, 70).unwrap();
        assert_eq!(ds.replicates.len(), 2);
        assert_eq!(ds.replicates[0].response, 2.0);
        assert_eq!(ds.replicates[1].response, -2.0);
        assert_eq!(ds.replicates[0].exposure, 1.0);
        assert_eq!(ds.replicates[0].po_indices.len(), 2);
        assert_eq!(ds.replicates[1].po_indices.len(), 1);
        ds.validate().unwrap();
    }

    #[test]
    fn game_phase_task() {
        let ds = build_task_replicates(&[final_match()], Task::GamePhase, 70).unwrap();
        assert_eq!(ds.replicates.len(), 4);
        let france: Vec<_> = ds.replicates.iter().take(2).collect();
        assert_eq!(france[0].exposure, 70.0 / 90.0);
        assert_eq!(france[1].exposure, 20.0 / 90.0);
        assert_eq!((france[0].response, france[1].response), (0.0, 1.0));
        assert_eq!(france[0].po_indices.len(), 1);
        assert_eq!(france[1].po_indices.len(), 1);
        let q: usize = ds.replicates.iter().map(|r| r.po_indices.len()).sum();
        assert_eq!(q, ds.pos.len());
        ds.validate().unwrap();
    }

    #[test]
    fn missing_score_names_match() {
        let mut m = final_match();
        m.info.home_score = None;
        let err = build_task_replicates(&[m], Task::GoalDifference, 70).unwrap_err();
        assert!(matches!(err, Error::MissingScore(ref id) if id == "8658"));
    }

    #[test]
    fn cut_out_of_range() {
        assert!(build_task_replicates(&[final_match()], Task::GamePhase, 0).is_err());
        assert!(build_task_replicates(&[final_match()], Task::GamePhase, 120).is_err());
    }
}
