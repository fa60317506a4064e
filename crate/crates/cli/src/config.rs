//! Flat key-value configuration files for the experiment and spectral
//! studies. Lines are `key = value`; blank lines and lines starting with
//! `#` are ignored. Unknown keys are rejected.
//!
//! Experiment keys (defaults in parentheses):
//!
//! ```text
//! model                 lorenz | heat          (required)
//! s                     state dimension        (required)
//! p                     observations per time  (s/2 lorenz, s/4 heat)
//! subwindows            N                      (15 lorenz, 5 heat)
//! steps_per_subwindow   model steps per window (10)
//! dt                    Lorenz time step       (1e-4)
//! heat_ratio            alpha dt/dx^2          (0.4)
//! seed                  u64                    (1)
//! tol                   solver tolerance       (1e-6)
//! maxit                 iteration cap          (1000)
//! shapes                pd,pi                  (pd,pi)
//! lhats                 l0,li,lm,exact         (l0,lm,exact)
//! k_list                comma list for lm      (1,2,3,4,N+1)
//! rhats                 diag,block,rr,me,exact (all)
//! d_identity            bool                   (false)
//! obs_smoothing         bool                   (true)
//! r_blocks              number of R_i blocks   (4)
//! pvec                  explicit block sizes   (near-equal split)
//! pcorr                 off-block multipliers  (3,0,0,0.1,0,2 pattern)
//! r_density             sparse density         (0.6)
//! r_floor               min-eigenvalue floor   (0.41)
//! r_soar_lengthscale    block SOAR L           (0.6)
//! r_soar_maxval         block SOAR maxval      (100)
//! r_soar_amplitude      block SOAR sigma       (1.5)
//! block_tol             auto | float           (auto)
//! block_maxsize         0 = unset              (0)
//! block_numproc         0 = unset              (0)
//! rr_gamma              auto | float           (auto)
//! me_t                  auto | float           (auto)
//! ```
//!
//! Spectral-study keys:
//!
//! ```text
//! study                 units | intervals | both  (both)
//! s, k, n_list          units study            (100, 3, "3,4,5,6")
//! steps_per_subwindow   units study            (1)
//! heat_ratio            units study            (0.4)
//! mode                  dense | extremes       (dense)
//! intervals_model             lorenz | heat          (lorenz)
//! intervals_s, intervals_p          intervals sizes        (20, s/2)
//! intervals_n                 intervals subwindows   (3)
//! intervals_k                 intervals L_M k        (3)
//! intervals_steps             steps per subwindow    (10)
//! seed                  u64                    (1)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;
use wc4dvar::covariance::BlockRSpec;
use wc4dvar::problem::{child_seed, LHatKind, ModelKind, ProblemSpec};
use wc4dvar::rprecond::RHatVariant;
use wc4dvar::saddle::PrecondShape;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    Malformed(usize),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: cannot parse `{value}`: {why}")]
    BadValue { key: String, value: String, why: String },
}

/// Raw parsed file: ordered key-value pairs.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Malformed(lineno + 1));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey(key));
        }
    }
    Ok(map)
}

struct Reader {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Reader {
    fn new(map: BTreeMap<String, String>) -> Self {
        Self { map, used: Default::default() }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.into(),
                value: v,
                why: e.to_string(),
            }),
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &'static str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Err(ConfigError::Missing(key)),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.into(),
                value: v,
                why: e.to_string(),
            }),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
                        key: key.into(),
                        value: item.trim().into(),
                        why: e.to_string(),
                    })
                })
                .collect(),
        }
    }

    /// `auto` (or absence) maps to `None`.
    fn auto_or(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) if v == "auto" => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e: std::num::ParseFloatError| ConfigError::BadValue {
                    key: key.into(),
                    value: v,
                    why: e.to_string(),
                }),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        Ok(())
    }
}

fn parse_model(v: &str) -> Result<ModelKind, ConfigError> {
    match v {
        "lorenz" => Ok(ModelKind::Lorenz),
        "heat" => Ok(ModelKind::Heat),
        other => Err(ConfigError::BadValue {
            key: "model".into(),
            value: other.into(),
            why: "expected lorenz or heat".into(),
        }),
    }
}

fn parse_shapes(items: &[String]) -> Result<Vec<PrecondShape>, ConfigError> {
    items
        .iter()
        .map(|v| match v.as_str() {
            "pd" => Ok(PrecondShape::BlockDiag),
            "pi" => Ok(PrecondShape::InexactConstraint),
            other => Err(ConfigError::BadValue {
                key: "shapes".into(),
                value: other.into(),
                why: "expected pd or pi".into(),
            }),
        })
        .collect()
}

fn parse_lhats(items: &[String]) -> Result<Vec<LHatKind>, ConfigError> {
    items
        .iter()
        .map(|v| match v.as_str() {
            "l0" => Ok(LHatKind::L0),
            "li" => Ok(LHatKind::LI),
            "lm" => Ok(LHatKind::LM),
            "exact" => Ok(LHatKind::Exact),
            other => Err(ConfigError::BadValue {
                key: "lhats".into(),
                value: other.into(),
                why: "expected l0, li, lm, or exact".into(),
            }),
        })
        .collect()
}

fn parse_rhats(items: &[String]) -> Result<Vec<RHatVariant>, ConfigError> {
    items
        .iter()
        .map(|v| match v.as_str() {
            "diag" => Ok(RHatVariant::Diag),
            "block" => Ok(RHatVariant::Block),
            "rr" => Ok(RHatVariant::Rr),
            "me" => Ok(RHatVariant::Me),
            "exact" => Ok(RHatVariant::Exact),
            other => Err(ConfigError::BadValue {
                key: "rhats".into(),
                value: other.into(),
                why: "expected diag, block, rr, me, or exact".into(),
            }),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub tol: f64,
    pub maxit: usize,
    pub shapes: Vec<PrecondShape>,
    pub lhats: Vec<LHatKind>,
    pub k_list: Vec<usize>,
    pub rhats: Vec<RHatVariant>,
    pub block_tol: Option<f64>,
    pub block_maxsize: Option<usize>,
    pub block_numproc: Option<usize>,
    pub rr_gamma: Option<f64>,
    pub me_t: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_text(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let mut r = Reader::new(parse_kv(text)?);
        let model = parse_model(&r.required::<String>("model")?)?;
        let s: usize = r.required("s")?;
        let default_p = match model {
            ModelKind::Lorenz => s / 2,
            ModelKind::Heat => s / 4,
        };
        let p: usize = r.parse("p", default_p)?;
        let default_n = match model {
            ModelKind::Lorenz => 15,
            ModelKind::Heat => 5,
        };
        let n: usize = r.parse("subwindows", default_n)?;
        let steps: usize = r.parse("steps_per_subwindow", 10)?;
        let dt: f64 = r.parse("dt", 1e-4)?;
        let heat_ratio: f64 = r.parse("heat_ratio", 0.4)?;
        let mut seed: u64 = r.parse("seed", 1)?;
        if let Some(s) = seed_override {
            seed = s;
        }
        let tol: f64 = r.parse("tol", 1e-6)?;
        let maxit: usize = r.parse("maxit", 1000)?;
        let shapes = parse_shapes(&r.list("shapes", vec!["pd".into(), "pi".into()])?)?;
        let lhats =
            parse_lhats(&r.list("lhats", vec!["l0".into(), "lm".into(), "exact".into()])?)?;
        let raw_k: Vec<usize> = r.list("k_list", vec![1, 2, 3, 4, n + 1])?;
        let mut k_list = Vec::new();
        for k in raw_k {
            if (1..=n + 1).contains(&k) && !k_list.contains(&k) {
                k_list.push(k);
            }
        }
        let rhats = parse_rhats(&r.list(
            "rhats",
            vec!["diag".into(), "block".into(), "rr".into(), "me".into(), "exact".into()],
        )?)?;
        let d_identity: bool = r.parse("d_identity", false)?;
        let obs_smoothing: bool = r.parse("obs_smoothing", true)?;

        let r_blocks: usize = r.parse("r_blocks", 4)?;
        let default_spec = BlockRSpec::default_for(p.max(r_blocks), 0);
        let pvec: Vec<usize> = match r.raw("pvec") {
            Some(v) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e: std::num::ParseIntError| {
                        ConfigError::BadValue {
                            key: "pvec".into(),
                            value: item.trim().into(),
                            why: e.to_string(),
                        }
                    })
                })
                .collect::<Result<_, _>>()?,
            None => {
                let base = p / r_blocks;
                let mut v = vec![base; r_blocks];
                if let Some(last) = v.last_mut() {
                    *last += p - base * r_blocks;
                }
                v
            }
        };
        if pvec.iter().any(|&q| q == 0) || pvec.iter().sum::<usize>() != p {
            return Err(ConfigError::BadValue {
                key: "pvec".into(),
                value: format!("{pvec:?}"),
                why: format!("blocks must be nonzero and sum to p = {p}"),
            });
        }
        let plen = pvec.len();
        let default_pcorr: Vec<f64> = if plen == 4 {
            default_spec.pcorr.clone()
        } else {
            // adjacent blocks strongly coupled except one weak boundary
            let mut v = vec![0.0; plen * (plen - 1) / 2];
            let mut idx = 0;
            for a in 0..plen {
                for b in a + 1..plen {
                    if b == a + 1 {
                        v[idx] = if a == plen / 2 { 0.1 } else { 2.0 };
                    }
                    idx += 1;
                }
            }
            v
        };
        let pcorr: Vec<f64> = r.list("pcorr", default_pcorr)?;
        let r_density: f64 = r.parse("r_density", default_spec.density)?;
        let r_floor: f64 = r.parse("r_floor", default_spec.min_eig_floor)?;
        let r_soar_lengthscale: f64 =
            r.parse("r_soar_lengthscale", default_spec.soar_lengthscale)?;
        let r_soar_maxval: usize = r.parse("r_soar_maxval", default_spec.soar_maxval)?;
        let r_soar_amplitude: f64 = r.parse("r_soar_amplitude", default_spec.soar_amplitude)?;

        let block_tol = r.auto_or("block_tol")?;
        let block_maxsize: usize = r.parse("block_maxsize", 0)?;
        let block_numproc: usize = r.parse("block_numproc", 0)?;
        let rr_gamma = r.auto_or("rr_gamma")?;
        let me_t = r.auto_or("me_t")?;
        r.finish()?;

        let problem = ProblemSpec {
            model,
            s,
            p,
            n,
            steps_per_subwindow: steps,
            dt,
            heat_ratio,
            d_identity,
            obs_smoothing,
            r_spec: BlockRSpec {
                pvec,
                pcorr,
                density: r_density,
                min_eig_floor: r_floor,
                soar_lengthscale: r_soar_lengthscale,
                soar_maxval: r_soar_maxval,
                soar_amplitude: r_soar_amplitude,
                seed: child_seed(seed, 3),
            },
            seed,
        };
        Ok(Self {
            problem,
            tol,
            maxit,
            shapes,
            lhats,
            k_list,
            rhats,
            block_tol,
            block_maxsize: (block_maxsize > 0).then_some(block_maxsize),
            block_numproc: (block_numproc > 0).then_some(block_numproc),
            rr_gamma,
            me_t,
        })
    }

    /// Canonical resolved form, used for the manifest and the fingerprint.
    pub fn echo(&self) -> String {
        let p = &self.problem;
        let mut out = String::new();
        let _ = writeln!(out, "model = {}", p.model);
        let _ = writeln!(out, "s = {}", p.s);
        let _ = writeln!(out, "p = {}", p.p);
        let _ = writeln!(out, "subwindows = {}", p.n);
        let _ = writeln!(out, "steps_per_subwindow = {}", p.steps_per_subwindow);
        let _ = writeln!(out, "dt = {:e}", p.dt);
        let _ = writeln!(out, "heat_ratio = {:e}", p.heat_ratio);
        let _ = writeln!(out, "seed = {}", p.seed);
        let _ = writeln!(out, "rng = chacha12");
        let _ = writeln!(out, "tol = {:e}", self.tol);
        let _ = writeln!(out, "maxit = {}", self.maxit);
        let _ = writeln!(
            out,
            "shapes = {}",
            self.shapes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            out,
            "lhats = {}",
            self.lhats.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            out,
            "k_list = {}",
            self.k_list.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            out,
            "rhats = {}",
            self.rhats.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "d_identity = {}", p.d_identity);
        let _ = writeln!(out, "obs_smoothing = {}", p.obs_smoothing);
        let _ = writeln!(
            out,
            "pvec = {}",
            p.r_spec.pvec.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            out,
            "pcorr = {}",
            p.r_spec.pcorr.iter().map(|k| format!("{k:e}")).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "r_density = {:e}", p.r_spec.density);
        let _ = writeln!(out, "r_floor = {:e}", p.r_spec.min_eig_floor);
        let _ = writeln!(out, "r_soar_lengthscale = {:e}", p.r_spec.soar_lengthscale);
        let _ = writeln!(out, "r_soar_maxval = {}", p.r_spec.soar_maxval);
        let _ = writeln!(out, "r_soar_amplitude = {:e}", p.r_spec.soar_amplitude);
        let fmt_auto =
            |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| format!("{x:e}"));
        let _ = writeln!(out, "block_tol = {}", fmt_auto(self.block_tol));
        let _ = writeln!(
            out,
            "block_maxsize = {}",
            self.block_maxsize.map_or_else(|| "unset".into(), |v: usize| v.to_string())
        );
        let _ = writeln!(
            out,
            "block_numproc = {}",
            self.block_numproc.map_or_else(|| "unset".into(), |v: usize| v.to_string())
        );
        let _ = writeln!(out, "rr_gamma = {}", fmt_auto(self.rr_gamma));
        let _ = writeln!(out, "me_t = {}", fmt_auto(self.me_t));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Units,
    Intervals,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMode {
    Dense,
    Extremes,
}

#[derive(Debug, Clone)]
pub struct SpectraConfig {
    pub study: StudyKind,
    pub s: usize,
    pub k: usize,
    pub n_list: Vec<usize>,
    pub steps_per_subwindow: usize,
    pub heat_ratio: f64,
    pub mode: SpectrumMode,
    pub intervals_model: ModelKind,
    pub intervals_s: usize,
    pub intervals_p: usize,
    pub intervals_n: usize,
    pub intervals_k: usize,
    pub intervals_steps: usize,
    pub seed: u64,
}

impl SpectraConfig {
    pub fn from_text(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let mut r = Reader::new(parse_kv(text)?);
        let study = match r.raw("study").unwrap_or_else(|| "both".into()).as_str() {
            "units" => StudyKind::Units,
            "intervals" => StudyKind::Intervals,
            "both" => StudyKind::Both,
            other => {
                return Err(ConfigError::BadValue {
                    key: "study".into(),
                    value: other.into(),
                    why: "expected units, intervals, or both".into(),
                })
            }
        };
        let s: usize = r.parse("s", 100)?;
        let k: usize = r.parse("k", 3)?;
        let n_list: Vec<usize> = r.list("n_list", vec![3, 4, 5, 6])?;
        let steps: usize = r.parse("steps_per_subwindow", 1)?;
        let heat_ratio: f64 = r.parse("heat_ratio", 0.4)?;
        let mode = match r.raw("mode").unwrap_or_else(|| "dense".into()).as_str() {
            "dense" => SpectrumMode::Dense,
            "extremes" => SpectrumMode::Extremes,
            other => {
                return Err(ConfigError::BadValue {
                    key: "mode".into(),
                    value: other.into(),
                    why: "expected dense or extremes".into(),
                })
            }
        };
        let intervals_model = parse_model(&r.parse("intervals_model", "lorenz".to_string())?)?;
        let intervals_s: usize = r.parse("intervals_s", 20)?;
        let intervals_p: usize = r.parse("intervals_p", intervals_s / 2)?;
        let intervals_n: usize = r.parse("intervals_n", 3)?;
        let intervals_k: usize = r.parse("intervals_k", 3)?;
        let intervals_steps: usize = r.parse("intervals_steps", 10)?;
        let mut seed: u64 = r.parse("seed", 1)?;
        if let Some(sv) = seed_override {
            seed = sv;
        }
        r.finish()?;
        Ok(Self {
            study,
            s,
            k,
            n_list,
            steps_per_subwindow: steps,
            heat_ratio,
            mode,
            intervals_model,
            intervals_s,
            intervals_p,
            intervals_n,
            intervals_k,
            intervals_steps,
            seed,
        })
    }

    pub fn echo(&self) -> String {
        let mut out = String::new();
        let study = match self.study {
            StudyKind::Units => "units",
            StudyKind::Intervals => "intervals",
            StudyKind::Both => "both",
        };
        let mode = match self.mode {
            SpectrumMode::Dense => "dense",
            SpectrumMode::Extremes => "extremes",
        };
        let _ = writeln!(out, "study = {study}");
        let _ = writeln!(out, "s = {}", self.s);
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(
            out,
            "n_list = {}",
            self.n_list.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "steps_per_subwindow = {}", self.steps_per_subwindow);
        let _ = writeln!(out, "heat_ratio = {:e}", self.heat_ratio);
        let _ = writeln!(out, "mode = {mode}");
        let _ = writeln!(out, "intervals_model = {}", self.intervals_model);
        let _ = writeln!(out, "intervals_s = {}", self.intervals_s);
        let _ = writeln!(out, "intervals_p = {}", self.intervals_p);
        let _ = writeln!(out, "intervals_n = {}", self.intervals_n);
        let _ = writeln!(out, "intervals_k = {}", self.intervals_k);
        let _ = writeln!(out, "intervals_steps = {}", self.intervals_steps);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "rng = chacha12");
        out
    }
}

/// FNV-1a over the canonical echo: a deterministic run fingerprint.
pub fn fingerprint(echo: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in echo.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}
