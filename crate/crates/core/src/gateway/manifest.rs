//! Job manifests: flat text, one field per line.
//!
//! ```text
//! customer: alice
//! program: guests/count.s
//! input query query.txt
//! fuel: 1000000
//! followup-allowed: yes
//! ```
//!
//! `program:` is a DVM1 container, an assembly file ending in `.s` (linked
//! with the runtime prelude) or `builtin:<name>` for a shipped program.
//! Paths are relative to the manifest's directory. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::GatewayError;
use crate::runtime::{link, programs};
use crate::vm::GuestProgram;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub customer: String,
    pub program: String,
    pub inputs: Vec<(String, String)>,
    pub fuel: u64,
    pub followup_allowed: bool,
}

/// A manifest with its program and inputs loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub customer: String,
    pub program: GuestProgram,
    pub inputs: Vec<(String, Vec<u8>)>,
    pub fuel: u64,
    pub followup_allowed: bool,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> GatewayError {
    GatewayError::Manifest(format!("line {line}: {msg}"))
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "yes" | "true" | "1" => Some(true),
        "no" | "false" | "0" => Some(false),
        _ => None,
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, GatewayError> {
        let (mut customer, mut program, mut fuel, mut followup) = (None, None, None, None);
        let mut inputs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(rest) = l.strip_prefix("input ") {
                let mut parts = rest.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(n), Some(p), None) => inputs.push((n.to_string(), p.to_string())),
                    _ => return Err(bad(line, "expected `input <name> <path>`")),
                }
                continue;
            }
            let (key, value) = l
                .split_once(':')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(line, "expected `key: value`"))?;
            let slot = match key {
                "customer" => &mut customer,
                "program" => &mut program,
                "fuel" => &mut fuel,
                "followup-allowed" => &mut followup,
                _ => return Err(bad(line, format!("unknown field `{key}`"))),
            };
            if slot.replace(value.to_string()).is_some() {
                return Err(bad(line, format!("duplicate field `{key}`")));
            }
        }
        let need = |v: Option<String>, k: &str| {
            v.filter(|s| !s.is_empty())
                .ok_or_else(|| GatewayError::Manifest(format!("missing field `{k}`")))
        };
        let fuel = need(fuel, "fuel")?;
        Ok(Manifest {
            customer: need(customer, "customer")?,
            program: need(program, "program")?,
            inputs,
            fuel: fuel
                .parse()
                .map_err(|_| GatewayError::Manifest(format!("bad fuel `{fuel}`")))?,
            followup_allowed: match followup {
                None => false,
                Some(v) => parse_bool(&v)
                    .ok_or_else(|| GatewayError::Manifest(format!("bad followup-allowed `{v}`")))?,
            },
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("customer: {}\nprogram: {}\n", self.customer, self.program);
        for (n, p) in &self.inputs {
            let _ = writeln!(s, "input {n} {p}");
        }
        let _ = writeln!(s, "fuel: {}", self.fuel);
        let _ = writeln!(
            s,
            "followup-allowed: {}",
            if self.followup_allowed { "yes" } else { "no" }
        );
        s
    }

    /// Loads the program and input files, resolving paths against `dir`.
    pub fn resolve(&self, dir: &Path) -> Result<JobSpec, GatewayError> {
        let read = |p: &str| {
            std::fs::read(dir.join(p)).map_err(|e| GatewayError::Io(format!("{p}: {e}")))
        };
        let program = load_program(&self.program, &read)?;
        let inputs = self
            .inputs
            .iter()
            .map(|(n, p)| Ok((n.clone(), read(p)?)))
            .collect::<Result<_, GatewayError>>()?;
        Ok(JobSpec {
            customer: self.customer.clone(),
            program,
            inputs,
            fuel: self.fuel,
            followup_allowed: self.followup_allowed,
        })
    }
}

fn load_program(
    reference: &str,
    read: &dyn Fn(&str) -> Result<Vec<u8>, GatewayError>,
) -> Result<GuestProgram, GatewayError> {
    if let Some(name) = reference.strip_prefix("builtin:") {
        let src = programs::source(name)
            .ok_or_else(|| GatewayError::Program(format!("no builtin program `{name}`")))?;
        return link(src).map_err(|e| GatewayError::Program(e.to_string()));
    }
    let bytes = read(reference)?;
    if reference.ends_with(".s") {
        let src = String::from_utf8(bytes)
            .map_err(|_| GatewayError::Program(format!("{reference}: not UTF-8")))?;
        link(&src).map_err(|e| GatewayError::Program(format!("{reference}: {e}")))
    } else {
        GuestProgram::from_bytes(&bytes)
            .map_err(|e| GatewayError::Program(format!("{reference}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = Manifest {
            customer: "alice".into(),
            program: "builtin:halt".into(),
            inputs: vec![("query".into(), "q.txt".into())],
            fuel: 5000,
            followup_allowed: true,
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn rejects_malformed() {
        for text in [
            "program: x\nfuel: 1\n",
            "customer: a\nprogram: x\nfuel: lots\n",
            "customer: a\nprogram: x\nfuel: 1\ncolour: red\n",
            "customer: a\ncustomer: b\nprogram: x\nfuel: 1\n",
            "customer: a\nprogram: x\nfuel: 1\ninput onlyname\n",
            "customer: a\nprogram: x\nfuel: 1\nfollowup-allowed: maybe\n",
        ] {
            assert!(matches!(Manifest::parse(text), Err(GatewayError::Manifest(_))), "{text}");
        }
    }

    #[test]
    fn resolves_builtin_and_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("q.txt"), b"hello").unwrap();
        let m = Manifest::parse("customer: a\nprogram: builtin:halt\ninput query q.txt\nfuel: 10\n").unwrap();
        let spec = m.resolve(dir.path()).unwrap();
        assert_eq!(spec.inputs, vec![("query".to_string(), b"hello".to_vec())]);
        assert!(!spec.followup_allowed);
        let missing = Manifest::parse("customer: a\nprogram: nope.dvm\nfuel: 10\n").unwrap();
        assert!(matches!(missing.resolve(dir.path()), Err(GatewayError::Io(_))));
    }
}
