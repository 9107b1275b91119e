//! Run configuration, checkpoints, episode logs, metrics CSV and SVG rendering.
//!
//! Configs are TOML with four optional tables (`env`, `trpo`, `curriculum`,
//! `eval`); anything missing takes its default and unknown keys are rejected.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"IATRPOCK"            magic, 8 bytes
//! u32                    format version
//! u64                    payload length
//! payload                u32 header length, JSON header, then f64 arrays
//! [u8; 32]               SHA-256 of the payload
//! ```
//!
//! The header lists the networks in payload order; each contributes its flat
//! weights followed by its log-std vector when it has one.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{EnvConfig, EnvId};
use crate::error::{Error, Result};
use crate::evalr::EpisodeTrace;
use crate::nnet::{MlpSpec, ParameterVector};
use crate::trainer::{hex, CurriculumConfig, FrozenPair, MetricsRow, PolicyHandle, PolicyKind};
use crate::trpo::TrpoConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IATRPOCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    /// Pairings drawn by the mixed-seed evaluation.
    pub n_pairs: usize,
    /// Episodes used for the Fréchet compromise analysis.
    pub frechet_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: 1000,
            n_pairs: 20,
            frechet_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub trpo: TrpoConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.trpo.validate()?;
        self.curriculum.validate()?;
        for (key, v) in [
            ("n_episodes", self.eval.n_episodes),
            ("n_pairs", self.eval.n_pairs),
            ("frechet_episodes", self.eval.frechet_episodes),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("eval.{key}"),
                    msg: "must be >= 1".into(),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let msg = e.inner().message().to_string();
        Error::Config {
            key: if key == "." { String::new() } else { key },
            msg,
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Identifies where an artifact came from; stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub format_version: u32,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash.into(),
            seed,
            format_version: FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub iterations: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyHandle,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    name: String,
    spec: MlpSpec,
    log_std: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: PolicyKind,
    env_id: EnvId,
    role: usize,
    n_agents: usize,
    modifier_goal: bool,
    meta: CheckpointMeta,
    nets: Vec<NetEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.policy;
        let mut nets: Vec<(&str, &ParameterVector)> = vec![("actor", &p.actor), ("critic", &p.critic)];
        if let Some(f) = &p.frozen_single {
            nets.push(("frozen_actor", &f.actor));
            nets.push(("frozen_critic", &f.critic));
        }
        let header = Header {
            kind: p.kind,
            env_id: p.env_id,
            role: p.role,
            n_agents: p.n_agents,
            modifier_goal: p.modifier_goal,
            meta: self.meta.clone(),
            nets: nets
                .iter()
                .map(|(name, pv)| NetEntry {
                    name: name.to_string(),
                    spec: pv.spec.clone(),
                    log_std: pv.log_std.is_some(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut payload = Vec::new();
        payload.extend_from_slice(&(header.len() as u32).to_le_bytes());
        payload.extend_from_slice(&header);
        for (_, pv) in &nets {
            for x in pv.flatten() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let rest = &bytes[20..];
        if rest.len() != len.checked_add(32).ok_or_else(|| corrupt("bad length"))? {
            return Err(corrupt(format!("expected {} payload bytes, found {}", len + 32, rest.len())));
        }
        let (payload, digest) = rest.split_at(len);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        if payload.len() < 4 {
            return Err(corrupt("missing header"));
        }
        let hlen = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
        let hbytes = payload.get(4..4 + hlen).ok_or_else(|| corrupt("header overruns payload"))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut data = &payload[4 + hlen..];
        let mut nets = Vec::with_capacity(header.nets.len());
        for entry in header.nets {
            entry.spec.validate()?;
            let n = entry.spec.param_count() + if entry.log_std { entry.spec.output_dim } else { 0 };
            if data.len() < n * 8 {
                return Err(corrupt(format!("network {} is truncated", entry.name)));
            }
            let flat: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
            nets.push((entry.name, ParameterVector::unflatten(entry.spec, entry.log_std, &flat)?));
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after the last network"));
        }
        let mut take = |name: &str| -> Result<ParameterVector> {
            let i = nets
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| corrupt(format!("missing network {name}")))?;
            Ok(nets.remove(i).1)
        };
        let actor = take("actor")?;
        let critic = take("critic")?;
        let frozen_single = if header.kind == PolicyKind::Composed {
            Some(FrozenPair {
                actor: take("frozen_actor")?,
                critic: take("frozen_critic")?,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            policy: PolicyHandle {
                kind: header.kind,
                env_id: header.env_id,
                role: header.role,
                n_agents: header.n_agents,
                actor,
                critic,
                frozen_single,
                modifier_goal: header.modifier_goal,
            },
            meta: header.meta,
        })
    }
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, c.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn checkpoint_path(dir: &Path, prefix: &str, role: usize) -> std::path::PathBuf {
    dir.join(format!("{prefix}_role{role}.ckpt"))
}

/// Saves one checkpoint per role as `<prefix>_role<k>.ckpt`.
pub fn save_team(dir: &Path, prefix: &str, team: &[PolicyHandle], meta: &CheckpointMeta) -> Result<()> {
    for p in team {
        let c = Checkpoint {
            policy: p.clone(),
            meta: meta.clone(),
        };
        save_checkpoint(&c, &checkpoint_path(dir, prefix, p.role))?;
    }
    Ok(())
}

/// Loads `<prefix>_role<k>.ckpt` for every role of the environment named in
/// the first checkpoint.
pub fn load_team(dir: &Path, prefix: &str) -> Result<Vec<Checkpoint>> {
    let first = load_checkpoint(&checkpoint_path(dir, prefix, 0))?;
    let n = first.policy.env_id.n_agents();
    let mut team = vec![first];
    for role in 1..n {
        team.push(load_checkpoint(&checkpoint_path(dir, prefix, role))?);
    }
    for (role, c) in team.iter().enumerate() {
        if c.policy.role != role || c.policy.env_id != team[0].policy.env_id || c.policy.kind != team[0].policy.kind {
            return Err(Error::Checkpoint(format!(
                "{}: inconsistent team member",
                checkpoint_path(dir, prefix, role).display()
            )));
        }
    }
    Ok(team)
}

#[derive(Serialize)]
struct EpisodeHeader<'a> {
    record: &'static str,
    #[serde(flatten)]
    prov: &'a Provenance,
    episode_seed: u64,
    env_id: EnvId,
    roles: &'a [usize],
    goals: &'a [[f64; 2]],
    length: usize,
}

#[derive(Serialize)]
struct StepLine<'a> {
    record: &'static str,
    episode_seed: u64,
    t: usize,
    agents: &'a [crate::envs::AgentState],
    actions: &'a [[f64; 2]],
    rewards: &'a [f64],
}

/// One header line per episode, then one line per recorded step.
pub fn log_episode(trace: &EpisodeTrace, prov: &Provenance, sink: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<episode log>", e);
    let header = EpisodeHeader {
        record: "episode",
        prov,
        episode_seed: trace.seed,
        env_id: trace.env_id,
        roles: &trace.roles,
        goals: &trace.goals,
        length: trace.length,
    };
    serde_json::to_writer(&mut *sink, &header).map_err(|e| io(e.into()))?;
    sink.write_all(b"\n").map_err(io)?;
    for s in &trace.steps {
        let line = StepLine {
            record: "step",
            episode_seed: trace.seed,
            t: s.t,
            agents: &s.agents,
            actions: &s.actions,
            rewards: &s.rewards,
        };
        serde_json::to_writer(&mut *sink, &line).map_err(|e| io(e.into()))?;
        sink.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub const METRICS_HEADER: [&str; 15] = [
    "stage",
    "agent",
    "iteration",
    "mean_episode_length",
    "success_probe",
    "agent_success_probe",
    "kl",
    "improvement",
    "value_mse",
    "accepted",
    "backtracks",
    "entropy",
    "seed",
    "config_hash",
    "format_version",
];

/// Streams metrics rows as CSV; the header is written on creation.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    prov: Provenance,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io("<metrics csv>", e),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W, prov: Provenance) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(METRICS_HEADER).map_err(csv_err)?;
        Ok(MetricsWriter { inner, prov })
    }

    pub fn row(&mut self, r: &MetricsRow) -> Result<()> {
        let fields = [
            r.stage.clone(),
            r.agent.to_string(),
            r.iteration.to_string(),
            r.mean_episode_length.to_string(),
            r.success_probe.to_string(),
            r.agent_success_probe.to_string(),
            r.kl.to_string(),
            r.improvement.to_string(),
            r.value_mse.to_string(),
            r.accepted.to_string(),
            r.backtracks.to_string(),
            r.entropy.to_string(),
            self.prov.seed.to_string(),
            self.prov.config_hash.clone(),
            self.prov.format_version.to_string(),
        ];
        self.inner.write_record(&fields).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io("<metrics csv>", e))?;
        self.inner
            .into_inner()
            .map_err(|e| Error::io("<metrics csv>", std::io::Error::other(e.to_string())))
    }
}

pub fn emit_metrics<W: Write>(rows: &[MetricsRow], prov: &Provenance, sink: W) -> Result<W> {
    let mut w = MetricsWriter::new(sink, prov.clone())?;
    for r in rows {
        w.row(r)?;
    }
    w.finish()
}

const AGENT_COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];
const PX: f64 = 80.0;

fn polyline(points: &[[f64; 2]], height: f64, color: &str, dashed: bool) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|p| format!("{:.2},{:.2}", p[0] * PX, (height - p[1]) * PX))
        .collect();
    let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
    format!(
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
        pts.join(" ")
    )
}

/// Course outline, goals and one polyline per agent and trace. Single-agent
/// replays are dashed, multi-agent rollouts solid.
pub fn render_svg(
    traces: &[EpisodeTrace],
    singles: Option<&[Vec<EpisodeTrace>]>,
    env: &EnvConfig,
    prov: &Provenance,
) -> Result<String> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Contract("nothing to render".into()))?;
    let geo = env.geometry(first.env_id);
    let (w, h) = (geo.bounds.x_max, geo.bounds.y_max);
    let mut out = String::new();
    out.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
        w * PX,
        h * PX,
        w * PX,
        h * PX
    ));
    out.push_str(&format!(
        "\n<desc>env={} config_hash={} seed={} format_version={}</desc>\n",
        first.env_id, prov.config_hash, prov.seed, prov.format_version
    ));
    out.push_str(&format!(
        r##"<rect x="0" y="0" width="{:.0}" height="{:.0}" fill="#fafafa" stroke="#000" stroke-width="2"/>"##,
        w * PX,
        h * PX
    ));
    out.push('\n');
    let lanes = &geo.lane_centers;
    for pair in lanes.windows(2) {
        let y = (h - 0.5 * (pair[0] + pair[1])) * PX;
        out.push_str(&format!(
            r##"<line x1="0" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#bbb" stroke-dasharray="10,8"/>"##,
            w * PX
        ));
        out.push('\n');
    }
    for (k, tr) in traces.iter().enumerate() {
        if tr.env_id != first.env_id {
            return Err(Error::Contract("traces from different environments".into()));
        }
        for (i, g) in tr.goals.iter().enumerate() {
            out.push_str(&format!(
                r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="{}" stroke-width="1"/>"#,
                g[0] * PX,
                (h - g[1]) * PX,
                geo.goal_radius * PX,
                AGENT_COLORS[i % AGENT_COLORS.len()]
            ));
            out.push('\n');
        }
        for (i, pts) in tr.positions.iter().enumerate() {
            let color = AGENT_COLORS[i % AGENT_COLORS.len()];
            out.push_str(&polyline(pts, h, color, false));
            out.push('\n');
            if let Some(s) = singles.and_then(|s| s.get(k)).and_then(|s| s.get(i)) {
                out.push_str(&polyline(&s.positions[0], h, color, true));
                out.push('\n');
            }
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_trajectories(
    traces: &[EpisodeTrace],
    singles: Option<&[Vec<EpisodeTrace>]>,
    env: &EnvConfig,
    prov: &Provenance,
    path: &Path,
) -> Result<()> {
    let svg = render_svg(traces, singles, env, prov)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.env.reward_scale, 3.0);
        assert_eq!(cfg.hash(), parse_config("").unwrap().hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn range_error_names_key() {
        let err = parse_config("[trpo]\ngamma = 1.5\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "trpo.gamma"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let err = parse_config("[trpo]\ngama = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let err = parse_config("[env]\nhorizon = \"long\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "env.horizon"), "{err}");
        let err = parse_config("[bogus]\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config("[curriculum]\nenv_id = \"C2\"\n").unwrap();
        let b = parse_config("").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.curriculum.env_id, EnvId::C2);
    }

    fn composed() -> PolicyHandle {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = PolicyHandle::new_single(EnvId::C2Fixed, 1, &[8, 8], 0.01, &mut rng).unwrap();
        PolicyHandle::new_composed(&s, 2, false, 0.01, &mut rng).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let c = Checkpoint {
            policy: composed(),
            meta: CheckpointMeta {
                seed: 9,
                iterations: 12,
                config_hash: "abc".into(),
            },
        };
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let bits = |p: &ParameterVector| p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.policy.actor), bits(&c.policy.actor));
        assert_eq!(bits(&back.policy.critic), bits(&c.policy.critic));
        let (f0, f1) = (back.policy.frozen_single.as_ref().unwrap(), c.policy.frozen_single.as_ref().unwrap());
        assert_eq!(bits(&f0.actor), bits(&f1.actor));
        assert_eq!(back, c);
    }

    #[test]
    fn damaged_checkpoints_are_refused() {
        let c = Checkpoint {
            policy: composed(),
            meta: CheckpointMeta {
                seed: 0,
                iterations: 0,
                config_hash: String::new(),
            },
        };
        let bytes = c.to_bytes();
        for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        let mut versioned = bytes;
        versioned[8] = 99;
        assert!(Checkpoint::from_bytes(&versioned).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn empty_metrics_are_header_only() {
        let out = emit_metrics(&[], &Provenance::new("h", 1), Vec::new()).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, METRICS_HEADER.join(",") + "\n");
    }

    #[test]
    fn metrics_rows_carry_provenance() {
        let row = MetricsRow {
            stage: "single".into(),
            iteration: 3,
            ..Default::default()
        };
        let out = emit_metrics(&[row.clone(), row], &Provenance::new("h", 7), Vec::new()).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("single,0,3,"));
        assert!(lines[1].ends_with(",7,h,1"));
    }
}
