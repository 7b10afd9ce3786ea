//! Run configuration: a TOML document resolved into typed settings. Every
//! lookup carries its dotted key path so errors can name the offending key.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::{Table, Value};

use gearkdv_core::dynamics::Sponge;
use gearkdv_core::model::{OriginalCoefficients, ReducedCoefficients};
use gearkdv_core::rough_data::DeltaKind;

use crate::error::RunError;

/// Read-only view of one TOML table that records which keys were consumed.
pub struct Section<'a> {
    table: &'a Table,
    path: String,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    pub fn new(table: &'a Table, path: &str) -> Self {
        Section {
            table,
            path: path.to_string(),
            used: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    fn wrong_type(&self, key: &str, want: &str, got: &Value) -> RunError {
        RunError::config(format!("{}: expected {want}, found {}", self.key_path(key), got.type_str()))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, RunError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Float(x)) => Ok(Some(*x)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(self.wrong_type(key, "a number", v)),
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64, RunError> {
        self.opt_f64(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, RunError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>, RunError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(self.wrong_type(key, "a non-negative integer", v)),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize, RunError> {
        self.opt_u64(key)?.map(|v| v as usize).ok_or_else(|| self.missing(key))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, RunError> {
        Ok(self.opt_u64(key)?.map(|v| v as usize).unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, RunError> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(self.wrong_type(key, "a boolean", v)),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<&'a str>, RunError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(v) => Err(self.wrong_type(key, "a string", v)),
        }
    }

    pub fn str(&self, key: &str) -> Result<&'a str, RunError> {
        self.opt_str(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn opt_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, RunError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(n) => Ok(*n as f64),
                    other => Err(RunError::config(format!(
                        "{}[{i}]: expected a number, found {}",
                        self.key_path(key),
                        other.type_str()
                    ))),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(v) => Err(self.wrong_type(key, "an array of numbers", v)),
        }
    }

    pub fn opt_table(&self, key: &str) -> Result<Option<Section<'a>>, RunError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(Section::new(t, &self.key_path(key)))),
            Some(v) => Err(self.wrong_type(key, "a table", v)),
        }
    }

    pub fn opt_array(&self, key: &str) -> Result<Option<&'a [Value]>, RunError> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Array(a)) => Ok(Some(a.as_slice())),
            Some(v) => Err(self.wrong_type(key, "an array", v)),
        }
    }

    pub fn missing(&self, key: &str) -> RunError {
        RunError::config(format!("missing required key {}", self.key_path(key)))
    }

    /// Rejects keys that were never looked up.
    pub fn finish(&self) -> Result<(), RunError> {
        let used = self.used.borrow();
        let unknown: Vec<String> = self
            .table
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| self.key_path(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(RunError::config(format!("unknown key(s): {}", unknown.join(", "))))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SystemConfig {
    Original(OriginalCoefficients),
    Reduced(ReducedCoefficients),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridConfig {
    pub n: usize,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TimeConfig {
    pub t_final: f64,
    pub dt: f64,
    pub stride: usize,
    pub sponge: Option<Sponge>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Zero,
    Gaussian {
        amplitude: f64,
        x0: f64,
        width: f64,
    },
    /// Exact soliton of `u_t + u_xxx + a u u_x = 0`; `a` defaults to the
    /// first coefficient of the u equation.
    Soliton {
        kappa: f64,
        x0: f64,
        a: Option<f64>,
        scale: f64,
    },
    Dirac {
        eps: f64,
        delta: DeltaKind,
        amplitude: f64,
    },
    Pv {
        eps: f64,
        amplitude: f64,
    },
    File {
        path: PathBuf,
        field: usize,
    },
    Combine {
        parts: Vec<DataSpec>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    pub u: DataSpec,
    pub v: DataSpec,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub plots: bool,
    pub dumps: bool,
}

/// Fully resolved run settings. Sections an experiment does not need may be
/// absent; `require_*` turns absence into a key-path error.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub system: Option<SystemConfig>,
    pub grid: Option<GridConfig>,
    pub time: TimeConfig,
    pub data: DataConfig,
    pub experiment: Option<String>,
    pub params: Table,
    pub output: OutputConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn require_system(&self) -> Result<SystemConfig, RunError> {
        self.system
            .ok_or_else(|| RunError::config("missing required table system (system.{a1,a2,a3,b1,b2} or system.reduced)"))
    }

    pub fn require_grid(&self) -> Result<GridConfig, RunError> {
        self.grid.ok_or_else(|| RunError::config("missing required key grid.N"))
    }

    pub fn params(&self) -> Section<'_> {
        Section::new(&self.params, "experiment.params")
    }
}

pub fn load(path: &Path) -> Result<Table, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| RunError::config(format!("config {} is not valid TOML: {e}", path.display())))
}

/// Resolves a raw document. Relative file paths are taken relative to `base`.
pub fn resolve(doc: &Table, base: &Path) -> Result<RunConfig, RunError> {
    let root = Section::new(doc, "");
    let system = root.opt_table("system")?.map(|s| parse_system(&s)).transpose()?;
    let grid = root.opt_table("grid")?.map(|s| parse_grid(&s)).transpose()?;
    let time = match root.opt_table("time")? {
        Some(s) => parse_time(&s)?,
        None => TimeConfig {
            t_final: 1.0,
            dt: 1e-3,
            stride: 10,
            sponge: None,
        },
    };
    let data = match root.opt_table("data")? {
        Some(s) => {
            let u = s.opt_table("u")?.map(|t| parse_data(&t, base)).transpose()?;
            let v = s.opt_table("v")?.map(|t| parse_data(&t, base)).transpose()?;
            s.finish()?;
            DataConfig {
                u: u.unwrap_or(DataSpec::Zero),
                v: v.unwrap_or(DataSpec::Zero),
            }
        }
        None => DataConfig {
            u: DataSpec::Zero,
            v: DataSpec::Zero,
        },
    };
    let (experiment, params) = match root.opt_table("experiment")? {
        Some(s) => {
            let name = s.opt_str("name")?.map(str::to_string);
            let params = s.opt_table("params")?.map(|p| p.table.clone()).unwrap_or_default();
            s.finish()?;
            (name, params)
        }
        None => (None, Table::new()),
    };
    let output = match root.opt_table("output")? {
        Some(s) => {
            let out = OutputConfig {
                dir: s.opt_str("dir")?.map(|d| base.join(d)),
                plots: s.bool_or("plots", true)?,
                dumps: s.bool_or("dumps", true)?,
            };
            s.finish()?;
            out
        }
        None => OutputConfig {
            dir: None,
            plots: true,
            dumps: true,
        },
    };
    let seed = root.opt_u64("seed")?.unwrap_or(0);
    // Sweep settings are consumed by the sweep driver.
    root.opt_table("sweep")?;
    root.finish()?;
    Ok(RunConfig {
        system,
        grid,
        time,
        data,
        experiment,
        params,
        output,
        seed,
    })
}

fn parse_system(s: &Section) -> Result<SystemConfig, RunError> {
    if let Some(r) = s.opt_table("reduced")? {
        let rc = ReducedCoefficients {
            a: r.f64("a")?,
            b: r.f64("b")?,
            c: r.f64("c")?,
            a_tilde: r.f64("a_tilde")?,
            b_tilde: r.f64("b_tilde")?,
            c_tilde: r.f64("c_tilde")?,
        };
        r.finish()?;
        if ["a1", "a2", "a3", "b1", "b2"].iter().any(|k| s.contains(k)) {
            return Err(RunError::config(
                "system: give either system.{a1,a2,a3,b1,b2} or system.reduced, not both",
            ));
        }
        s.finish()?;
        if !rc.is_finite() {
            return Err(RunError::config("system.reduced: coefficients must be finite"));
        }
        return Ok(SystemConfig::Reduced(rc));
    }
    let oc = OriginalCoefficients::new(s.f64("a1")?, s.f64("a2")?, s.f64("a3")?, s.f64("b1")?, s.f64("b2")?);
    s.finish()?;
    let violations = gearkdv_core::model::validate(&oc);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(RunError::config(format!("system: {}", list.join(", "))));
    }
    Ok(SystemConfig::Original(oc))
}

fn parse_grid(s: &Section) -> Result<GridConfig, RunError> {
    let n = s.usize("N")?;
    let length = s.f64_or("L", 100.0)?;
    s.finish()?;
    if n < 16 || !n.is_power_of_two() {
        return Err(RunError::config(format!("grid.N must be a power of two >= 16, got {n}")));
    }
    if !(length > 0.0 && length.is_finite()) {
        return Err(RunError::config(format!("grid.L must be positive, got {length}")));
    }
    Ok(GridConfig { n, length })
}

fn parse_time(s: &Section) -> Result<TimeConfig, RunError> {
    let t_final = s.f64_or("T", 1.0)?;
    let dt = s.f64_or("dt", 1e-3)?;
    let stride = s.usize_or("stride", 10)?;
    let sponge = match s.opt_table("sponge")? {
        Some(sp) => {
            let sponge = Sponge {
                start_fraction: sp.f64_or("start_fraction", 0.6)?,
                strength: sp.f64("strength")?,
            };
            sp.finish()?;
            if !(0.0..1.0).contains(&sponge.start_fraction) || !(sponge.strength >= 0.0) {
                return Err(RunError::config(
                    "time.sponge: start_fraction must lie in [0, 1) and strength must be non-negative",
                ));
            }
            Some(sponge)
        }
        None => None,
    };
    s.finish()?;
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(RunError::config(format!("time.T must be positive, got {t_final}")));
    }
    if !(dt > 0.0 && dt <= t_final) {
        return Err(RunError::config(format!("time.dt must lie in (0, T], got {dt}")));
    }
    if stride == 0 {
        return Err(RunError::config("time.stride must be at least 1"));
    }
    Ok(TimeConfig {
        t_final,
        dt,
        stride,
        sponge,
    })
}

fn parse_delta_kind(s: &Section) -> Result<DeltaKind, RunError> {
    match s.opt_str("delta")?.unwrap_or("gaussian") {
        "gaussian" => Ok(DeltaKind::Gaussian),
        "band_limited" => Ok(DeltaKind::BandLimited),
        other => Err(RunError::config(format!(
            "{}: unknown value {other:?} (gaussian | band_limited)",
            s.key_path("delta")
        ))),
    }
}

pub fn parse_data(s: &Section, base: &Path) -> Result<DataSpec, RunError> {
    let spec = match s.str("kind")? {
        "zero" => DataSpec::Zero,
        "gaussian" => DataSpec::Gaussian {
            amplitude: s.f64_or("amplitude", 1.0)?,
            x0: s.f64_or("x0", 0.0)?,
            width: s.f64_or("width", 1.0)?,
        },
        "soliton" => DataSpec::Soliton {
            kappa: s.f64_or("kappa", 1.0)?,
            x0: s.f64_or("x0", 0.0)?,
            a: s.opt_f64("a")?,
            scale: s.f64_or("scale", 1.0)?,
        },
        "dirac" => DataSpec::Dirac {
            eps: s.f64("eps")?,
            delta: parse_delta_kind(s)?,
            amplitude: s.f64_or("amplitude", 1.0)?,
        },
        "pv" => DataSpec::Pv {
            eps: s.f64("eps")?,
            amplitude: s.f64_or("amplitude", 1.0)?,
        },
        "file" => DataSpec::File {
            path: base.join(s.str("path")?),
            field: s.usize_or("field", 0)?,
        },
        "combine" => {
            let items = s.opt_array("parts")?.ok_or_else(|| s.missing("parts"))?;
            let mut parts = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let path = format!("{}[{i}]", s.key_path("parts"));
                match item {
                    Value::Table(t) => parts.push(parse_data(&Section::new(t, &path), base)?),
                    other => {
                        return Err(RunError::config(format!("{path}: expected a table, found {}", other.type_str())))
                    }
                }
            }
            let weights = s.opt_f64_list("weights")?.ok_or_else(|| s.missing("weights"))?;
            if weights.len() != parts.len() {
                return Err(RunError::config(format!(
                    "{}: {} weights for {} parts",
                    s.key_path("weights"),
                    weights.len(),
                    parts.len()
                )));
            }
            DataSpec::Combine { parts, weights }
        }
        other => {
            return Err(RunError::config(format!(
                "{}: unknown data kind {other:?} (zero | gaussian | soliton | dirac | pv | file | combine)",
                s.key_path("kind")
            )))
        }
    };
    s.finish()?;
    Ok(spec)
}

/// Sets `value` at a dotted key path, creating intermediate tables. The
/// existing value, if any, must be a scalar.
pub fn set_scalar(doc: &mut Table, path: &str, value: Value) -> Result<(), RunError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(RunError::config(format!("malformed key path {path:?}")));
    }
    let (leaf, tables) = parts.split_last().expect("split yields at least one part");
    let mut cur = doc;
    for (depth, p) in tables.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(RunError::config(format!(
                    "{} is not a table",
                    parts[..=depth].join(".")
                )))
            }
        };
    }
    if let Some(existing) = cur.get(*leaf) {
        if matches!(existing, Value::Table(_) | Value::Array(_)) {
            return Err(RunError::config(format!("sweep axis {path} is not a scalar key")));
        }
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

/// Parses a command-line value as a TOML scalar, falling back to a string.
pub fn parse_scalar(text: &str) -> Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<Table>().ok().and_then(|mut t| t.remove("v")) {
        Some(v @ (Value::Integer(_) | Value::Float(_) | Value::Boolean(_) | Value::String(_))) => v,
        _ => Value::String(text.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Table {
        text.parse().unwrap()
    }

    #[test]
    fn missing_grid_size_is_named() {
        let err = resolve(&doc("[grid]\nL = 40"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("grid.N"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn wrong_types_and_unknown_keys_carry_paths() {
        let err = resolve(&doc("[grid]\nN = \"many\""), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("grid.N: expected a non-negative integer"), "{err}");
        let err = resolve(&doc("[time]\nT = 1\nstep = 2"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("time.step"), "{err}");
        let err = resolve(&doc("[data.u]\nkind = \"dirac\""), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("data.u.eps"), "{err}");
    }

    #[test]
    fn defaults_and_both_system_forms() {
        let cfg = resolve(&doc("[grid]\nN = 64"), Path::new(".")).unwrap();
        assert_eq!(cfg.grid.unwrap().length, 100.0);
        assert_eq!(cfg.seed, 0);
        assert!(matches!(cfg.data.u, DataSpec::Zero));
        let cfg = resolve(
            &doc("[system.reduced]\na = 1\nb = 0\nc = 0\na_tilde = 0\nb_tilde = 1\nc_tilde = 0"),
            Path::new("."),
        )
        .unwrap();
        assert!(matches!(cfg.system, Some(SystemConfig::Reduced(_))));
        let err = resolve(&doc("[system]\na1 = 0\na2 = 0\na3 = 1\nb1 = 1\nb2 = 1"), Path::new(".")).unwrap_err();
        assert!(err.to_string().starts_with("system:"), "{err}");
    }

    #[test]
    fn combine_parts_are_checked_recursively() {
        let text = "[data.u]\nkind = \"combine\"\nweights = [1, 2]\nparts = [{ kind = \"gaussian\" }, { kind = \"pv\" }]";
        let err = resolve(&doc(text), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("data.u.parts[1].eps"), "{err}");
    }

    #[test]
    fn set_scalar_rules() {
        let mut d = doc("[grid]\nN = 64\n[data.u]\nkind = \"combine\"\nweights = [1]");
        set_scalar(&mut d, "grid.N", Value::Integer(128)).unwrap();
        assert_eq!(d["grid"]["N"].as_integer(), Some(128));
        set_scalar(&mut d, "experiment.params.t_probe", Value::Float(0.25)).unwrap();
        assert_eq!(d["experiment"]["params"]["t_probe"].as_float(), Some(0.25));
        assert!(set_scalar(&mut d, "data.u.weights", Value::Integer(1)).is_err());
        assert!(set_scalar(&mut d, "grid", Value::Integer(1)).is_err());
        assert!(set_scalar(&mut d, "grid.N.x", Value::Integer(1)).is_err());
    }

    #[test]
    fn scalars_parse_as_toml() {
        assert_eq!(parse_scalar("3"), Value::Integer(3));
        assert_eq!(parse_scalar("0.05"), Value::Float(0.05));
        assert_eq!(parse_scalar("true"), Value::Boolean(true));
        assert_eq!(parse_scalar("band_limited"), Value::String("band_limited".into()));
    }
}
