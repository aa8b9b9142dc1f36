//! Flat `key = value` run configuration and the run manifest.
//!
//! Lines starting with `#` are comments. `preset = desk|full` is applied
//! first wherever it appears; every other key overrides one field. Derived
//! quantities (N_c, N_RF, token limits, window lengths) are recomputed after
//! all keys are read.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::{ChannelModelConfig, SystemConfig};
use crate::training::TrainConfig;
use crate::tudcen::{ChannelDims, GenTransformerConfig, SfseConfig, TudcenConfig, UdccnConfig};
use crate::C64;

/// Fixed transceiver asymmetry shared by every trace of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibSpec {
    pub seed: u64,
    pub bs_gain: f64,
    pub bs_phase: f64,
    pub ue_gain: f64,
    pub ue_phase: f64,
    pub ripple: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpec {
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub delay_spread_ns: f64,
    pub angle_spread_deg: f64,
    pub geometry_seed: Option<u64>,
    pub calib: Option<CalibSpec>,
}

impl ChannelSpec {
    pub fn model(&self, sys: &SystemConfig, seed: u64) -> ChannelModelConfig {
        let mut m = ChannelModelConfig::new(sys, seed);
        m.n_clusters = self.n_clusters;
        m.rays_per_cluster = self.rays_per_cluster;
        m.delay_spread_s = self.delay_spread_ns * 1e-9;
        m.angle_spread_deg = self.angle_spread_deg;
        m.geometry_seed = self.geometry_seed;
        if let Some(c) = self.calib {
            m = m.with_random_calibration(
                c.seed,
                C64::from_polar(c.bs_gain, c.bs_phase),
                C64::from_polar(c.ue_gain, c.ue_phase),
                c.ripple,
            );
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UplinkInput {
    Truth,
    Sfcen,
    LsDft,
}

impl FromStr for UplinkInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "truth" => Ok(UplinkInput::Truth),
            "sfcen" => Ok(UplinkInput::Sfcen),
            "ls_dft" => Ok(UplinkInput::LsDft),
            _ => Err(format!("expected truth|sfcen|ls_dft, got {s:?}")),
        }
    }
}

impl std::fmt::Display for UplinkInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UplinkInput::Truth => "truth",
            UplinkInput::Sfcen => "sfcen",
            UplinkInput::LsDft => "ls_dft",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub sys: SystemConfig,
    pub comb: usize,
    pub r_s: usize,
    pub pilot_seed: u64,
    pub channel: ChannelSpec,
    pub n_traces: usize,
    pub trace_seed: u64,
    pub sfcen_d_rep: usize,
    pub sfcen_heads: usize,
    pub sfcen_p_attn: f64,
    pub sfcen_p_seg: f64,
    pub tudcen: TudcenConfig,
    pub udccn_input: UplinkInput,
    pub train_sfcen: TrainConfig,
    pub train_tudcen: TrainConfig,
    pub eval_snr_db: f64,
    pub eval_seed: u64,
}

impl RunConfig {
    pub fn desk() -> Self {
        let sys = SystemConfig::desk();
        let n_slot = sys.n_slot;
        let mut c = RunConfig {
            preset: "desk".into(),
            sys,
            comb: 4,
            r_s: 2,
            pilot_seed: 0,
            channel: ChannelSpec {
                n_clusters: 5,
                rays_per_cluster: 4,
                delay_spread_ns: 100.0,
                angle_spread_deg: 5.0,
                geometry_seed: Some(7),
                calib: Some(CalibSpec { seed: 5, bs_gain: 1.3, bs_phase: 2.0, ue_gain: 0.8, ue_phase: -1.0, ripple: 0.05 }),
            },
            n_traces: 20,
            trace_seed: 100,
            sfcen_d_rep: 64,
            sfcen_heads: 4,
            sfcen_p_attn: 0.1,
            sfcen_p_seg: 0.1,
            tudcen: TudcenConfig {
                dims: ChannelDims { n_tx: 8, n_rx: 2, n_sc: 96 },
                udccn: UdccnConfig { kernel: 3, d_feat: 8 },
                sfse: SfseConfig { n1: 2, n2: 12, d_emb: 64 },
                gen: GenTransformerConfig {
                    n_layers: 2,
                    d_rep: 64,
                    n_heads: 4,
                    d_ff: 128,
                    p_attn: 0.0,
                    p_ff: 0.0,
                    max_tokens: n_slot - 1,
                },
            },
            udccn_input: UplinkInput::Sfcen,
            train_sfcen: TrainConfig {
                batch: 16,
                lr0: 1e-3,
                epochs: 50,
                patience: 20,
                split: (16, 2, 2),
                snr_db: 20.0,
                ..TrainConfig::full_sfcen(n_slot)
            },
            train_tudcen: TrainConfig {
                batch: 16,
                lr0: 3e-3,
                epochs: 40,
                patience: 20,
                split: (16, 2, 2),
                snr_db: 20.0,
                ..TrainConfig::full_tudcen(n_slot)
            },
            eval_snr_db: 20.0,
            eval_seed: 4242,
        };
        c.finalize();
        c
    }

    pub fn full() -> Self {
        let sys = SystemConfig::full();
        let n_slot = sys.n_slot;
        let mut c = RunConfig {
            preset: "full".into(),
            sys,
            n_traces: 105,
            sfcen_d_rep: 512,
            sfcen_heads: 4,
            sfcen_p_attn: 0.5,
            sfcen_p_seg: 0.5,
            tudcen: TudcenConfig {
                dims: ChannelDims { n_tx: 32, n_rx: 4, n_sc: 624 },
                udccn: UdccnConfig::full(),
                sfse: SfseConfig::full(),
                gen: GenTransformerConfig::full(n_slot),
            },
            train_sfcen: TrainConfig::full_sfcen(n_slot),
            train_tudcen: TrainConfig::full_tudcen(n_slot),
            eval_snr_db: 5.0,
            ..Self::desk()
        };
        c.finalize();
        c
    }

    /// Recomputes derived fields from the primary ones.
    fn finalize(&mut self) {
        let s = &mut self.sys;
        s.n_sc = 12 * s.n_rb;
        if self.r_s > 0 {
            s.n_rf = s.n_tx / self.r_s;
        }
        self.tudcen.dims = ChannelDims { n_tx: s.n_tx, n_rx: s.n_rx, n_sc: s.n_sc };
        self.tudcen.gen.max_tokens = s.n_slot.saturating_sub(1).max(1);
        for t in [&mut self.train_sfcen, &mut self.train_tudcen] {
            t.window_len = s.n_slot;
            t.stride = s.n_slot;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sys.validate()?;
        if self.r_s == 0 || !self.sys.n_tx.is_multiple_of(self.r_s) {
            return Err(Error::config(format!("r_s = {} must divide n_tx = {}", self.r_s, self.sys.n_tx)));
        }
        self.tudcen.validate()?;
        self.train_sfcen.validate(self.sys.n_slot)?;
        self.train_tudcen.validate(self.sys.n_slot)?;
        let (a, b, c) = self.train_sfcen.split;
        if a + b + c > self.n_traces {
            return Err(Error::config(format!("split needs {} traces, n_traces = {}", a + b + c, self.n_traces)));
        }
        Ok(())
    }

    /// Channel model for trace `k` of the dataset.
    pub fn trace_model(&self, k: usize) -> ChannelModelConfig {
        self.channel.model(&self.sys, self.trace_seed + k as u64)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    path: path.display().to_string(),
                    line: n + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            None => Self::desk(),
            Some((_, _, v)) if v == "desk" => Self::desk(),
            Some((_, _, v)) if v == "full" => Self::full(),
            Some((line, _, v)) => {
                return Err(Error::ConfigParse {
                    path: path.display().to_string(),
                    line: *line,
                    msg: format!("preset: expected desk|full, got {v:?}"),
                })
            }
        };
        for (line, k, v) in &pairs {
            if k == "preset" || k.starts_with("manifest.") || k.starts_with("file.") {
                continue;
            }
            cfg.set(k, v).map_err(|msg| Error::ConfigParse { path: path.display().to_string(), line: *line, msg })?;
        }
        cfg.finalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn opt(key: &str, v: &str) -> std::result::Result<Option<u64>, String> {
            if v == "none" {
                Ok(None)
            } else {
                p(key, v).map(Some)
            }
        }
        fn calib(c: &mut Option<CalibSpec>) -> &mut CalibSpec {
            c.get_or_insert(CalibSpec { seed: 0, bs_gain: 1.0, bs_phase: 0.0, ue_gain: 1.0, ue_phase: 0.0, ripple: 0.0 })
        }
        let k = key;
        match key {
            "system.n_tx" => self.sys.n_tx = p(k, v)?,
            "system.n_rx" => self.sys.n_rx = p(k, v)?,
            "system.n_rb" => self.sys.n_rb = p(k, v)?,
            "system.carrier_hz" => self.sys.carrier_hz = p(k, v)?,
            "system.scs_hz" => self.sys.scs_hz = p(k, v)?,
            "system.numerology" => self.sys.numerology = p(k, v)?,
            "system.n_slot" => self.sys.n_slot = p(k, v)?,
            "system.n_subframes" => self.sys.n_subframes = p(k, v)?,
            "system.srs_period_ms" => self.sys.srs_period_ms = p(k, v)?,
            "system.velocity_kmh" => self.sys.ue_velocity_kmh = p(k, v)?,
            "system.snr_db" => self.sys.snr_db = p(k, v)?,
            "pilots.comb" => self.comb = p(k, v)?,
            "pilots.r_s" => self.r_s = p(k, v)?,
            "pilots.seed" => self.pilot_seed = p(k, v)?,
            "channel.n_clusters" => self.channel.n_clusters = p(k, v)?,
            "channel.rays_per_cluster" => self.channel.rays_per_cluster = p(k, v)?,
            "channel.delay_spread_ns" => self.channel.delay_spread_ns = p(k, v)?,
            "channel.angle_spread_deg" => self.channel.angle_spread_deg = p(k, v)?,
            "channel.geometry_seed" => self.channel.geometry_seed = opt(k, v)?,
            "channel.calibration" => match v {
                "none" => self.channel.calib = None,
                "random" => {
                    calib(&mut self.channel.calib);
                }
                _ => return Err(format!("{k}: expected none|random, got {v:?}")),
            },
            "channel.calib_seed" => calib(&mut self.channel.calib).seed = p(k, v)?,
            "channel.calib_bs_gain" => calib(&mut self.channel.calib).bs_gain = p(k, v)?,
            "channel.calib_bs_phase" => calib(&mut self.channel.calib).bs_phase = p(k, v)?,
            "channel.calib_ue_gain" => calib(&mut self.channel.calib).ue_gain = p(k, v)?,
            "channel.calib_ue_phase" => calib(&mut self.channel.calib).ue_phase = p(k, v)?,
            "channel.calib_ripple" => calib(&mut self.channel.calib).ripple = p(k, v)?,
            "dataset.n_traces" => self.n_traces = p(k, v)?,
            "dataset.trace_seed" => self.trace_seed = p(k, v)?,
            "sfcen.d_rep" => self.sfcen_d_rep = p(k, v)?,
            "sfcen.n_heads" => self.sfcen_heads = p(k, v)?,
            "sfcen.p_attn" => self.sfcen_p_attn = p(k, v)?,
            "sfcen.p_seg" => self.sfcen_p_seg = p(k, v)?,
            "udccn.kernel" => self.tudcen.udccn.kernel = p(k, v)?,
            "udccn.d_feat" => self.tudcen.udccn.d_feat = p(k, v)?,
            "udccn.input" => self.udccn_input = p(k, v)?,
            "sfse.n1" => self.tudcen.sfse.n1 = p(k, v)?,
            "sfse.n2" => self.tudcen.sfse.n2 = p(k, v)?,
            "sfse.d_emb" => self.tudcen.sfse.d_emb = p(k, v)?,
            "dcen.n_layers" => self.tudcen.gen.n_layers = p(k, v)?,
            "dcen.d_rep" => self.tudcen.gen.d_rep = p(k, v)?,
            "dcen.n_heads" => self.tudcen.gen.n_heads = p(k, v)?,
            "dcen.d_ff" => self.tudcen.gen.d_ff = p(k, v)?,
            "dcen.p_attn" => self.tudcen.gen.p_attn = p(k, v)?,
            "dcen.p_ff" => self.tudcen.gen.p_ff = p(k, v)?,
            "eval.snr_db" => self.eval_snr_db = p(k, v)?,
            "eval.seed" => self.eval_seed = p(k, v)?,
            _ => {
                let (group, field) = key.split_once('.').ok_or_else(|| format!("unknown key {key:?}"))?;
                let t = match group {
                    "train_sfcen" => &mut self.train_sfcen,
                    "train_tudcen" => &mut self.train_tudcen,
                    _ => return Err(format!("unknown key {key:?}")),
                };
                match field {
                    "batch" => t.batch = p(k, v)?,
                    "lr" => t.lr0 = p(k, v)?,
                    "lr_floor" => t.lr_floor = p(k, v)?,
                    "epochs" => t.epochs = p(k, v)?,
                    "patience" => t.patience = p(k, v)?,
                    "seed" => t.seed = p(k, v)?,
                    "clip_norm" => t.clip_norm = p(k, v)?,
                    "snr_db" => t.snr_db = p(k, v)?,
                    "snr_spread_db" => t.snr_spread_db = p(k, v)?,
                    "joint" => t.joint = p(k, v)?,
                    "split" => {
                        let parts: Vec<usize> = v
                            .split(',')
                            .map(|s| s.trim().parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| format!("{k}: expected three comma-separated counts"))?;
                        let [a, b, c] = parts[..] else {
                            return Err(format!("{k}: expected three comma-separated counts"));
                        };
                        t.split = (a, b, c);
                    }
                    _ => return Err(format!("unknown key {key:?}")),
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let f = |x: f64| format!("{x:?}");
        kv("preset", self.preset.clone());
        let y = &self.sys;
        kv("system.n_tx", y.n_tx.to_string());
        kv("system.n_rx", y.n_rx.to_string());
        kv("system.n_rb", y.n_rb.to_string());
        kv("system.carrier_hz", f(y.carrier_hz));
        kv("system.scs_hz", f(y.scs_hz));
        kv("system.numerology", y.numerology.to_string());
        kv("system.n_slot", y.n_slot.to_string());
        kv("system.n_subframes", y.n_subframes.to_string());
        kv("system.srs_period_ms", f(y.srs_period_ms));
        kv("system.velocity_kmh", f(y.ue_velocity_kmh));
        kv("system.snr_db", f(y.snr_db));
        kv("pilots.comb", self.comb.to_string());
        kv("pilots.r_s", self.r_s.to_string());
        kv("pilots.seed", self.pilot_seed.to_string());
        let c = &self.channel;
        kv("channel.n_clusters", c.n_clusters.to_string());
        kv("channel.rays_per_cluster", c.rays_per_cluster.to_string());
        kv("channel.delay_spread_ns", f(c.delay_spread_ns));
        kv("channel.angle_spread_deg", f(c.angle_spread_deg));
        kv("channel.geometry_seed", c.geometry_seed.map_or("none".into(), |g| g.to_string()));
        match c.calib {
            None => kv("channel.calibration", "none".into()),
            Some(cb) => {
                kv("channel.calibration", "random".into());
                kv("channel.calib_seed", cb.seed.to_string());
                kv("channel.calib_bs_gain", f(cb.bs_gain));
                kv("channel.calib_bs_phase", f(cb.bs_phase));
                kv("channel.calib_ue_gain", f(cb.ue_gain));
                kv("channel.calib_ue_phase", f(cb.ue_phase));
                kv("channel.calib_ripple", f(cb.ripple));
            }
        }
        kv("dataset.n_traces", self.n_traces.to_string());
        kv("dataset.trace_seed", self.trace_seed.to_string());
        kv("sfcen.d_rep", self.sfcen_d_rep.to_string());
        kv("sfcen.n_heads", self.sfcen_heads.to_string());
        kv("sfcen.p_attn", f(self.sfcen_p_attn));
        kv("sfcen.p_seg", f(self.sfcen_p_seg));
        let t = &self.tudcen;
        kv("udccn.kernel", t.udccn.kernel.to_string());
        kv("udccn.d_feat", t.udccn.d_feat.to_string());
        kv("udccn.input", self.udccn_input.to_string());
        kv("sfse.n1", t.sfse.n1.to_string());
        kv("sfse.n2", t.sfse.n2.to_string());
        kv("sfse.d_emb", t.sfse.d_emb.to_string());
        kv("dcen.n_layers", t.gen.n_layers.to_string());
        kv("dcen.d_rep", t.gen.d_rep.to_string());
        kv("dcen.n_heads", t.gen.n_heads.to_string());
        kv("dcen.d_ff", t.gen.d_ff.to_string());
        kv("dcen.p_attn", f(t.gen.p_attn));
        kv("dcen.p_ff", f(t.gen.p_ff));
        for (name, tr) in [("train_sfcen", &self.train_sfcen), ("train_tudcen", &self.train_tudcen)] {
            kv(&format!("{name}.batch"), tr.batch.to_string());
            kv(&format!("{name}.lr"), f(tr.lr0));
            kv(&format!("{name}.lr_floor"), f(tr.lr_floor));
            kv(&format!("{name}.epochs"), tr.epochs.to_string());
            kv(&format!("{name}.patience"), tr.patience.to_string());
            kv(&format!("{name}.seed"), tr.seed.to_string());
            kv(&format!("{name}.clip_norm"), f(tr.clip_norm));
            kv(&format!("{name}.snr_db"), f(tr.snr_db));
            kv(&format!("{name}.snr_spread_db"), f(tr.snr_spread_db));
            kv(&format!("{name}.joint"), tr.joint.to_string());
            kv(&format!("{name}.split"), format!("{},{},{}", tr.split.0, tr.split.1, tr.split.2));
        }
        kv("eval.snr_db", f(self.eval_snr_db));
        kv("eval.seed", self.eval_seed.to_string());
        s
    }
}

/// Resolved configuration plus provenance of a command's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub tool_version: String,
    pub created_unix: u64,
    pub files: Vec<(String, PathBuf)>,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        RunManifest { config, tool_version: env!("CARGO_PKG_VERSION").to_string(), created_unix, files: Vec::new() }
    }

    pub fn add_file(&mut self, name: &str, path: &Path) {
        self.files.push((name.to_string(), path.to_path_buf()));
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# mxlab run manifest\nmanifest.tool_version = {}\nmanifest.created_unix = {}\n",
            self.tool_version, self.created_unix
        );
        s.push_str(&self.config.to_text());
        for (k, p) in &self.files {
            let _ = writeln!(s, "file.{k} = {}", p.display());
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
