//! Per-process syscall event log.
//!
//! Each process records its own events in program order. The guest log is
//! the concatenation of the per-process logs in process-path order, so its
//! content does not depend on how processes were interleaved.

use std::fmt;

use crate::vm::abi::{Options, Transfer};

/// Position of a process in the guest hierarchy: the sequence of child
/// indices from the root. The root has the empty path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ProcessPath(pub Vec<u32>);

impl ProcessPath {
    pub fn root() -> ProcessPath {
        ProcessPath(Vec::new())
    }

    pub fn child(&self, index: u32) -> ProcessPath {
        let mut v = self.0.clone();
        v.push(index);
        ProcessPath(v)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for ProcessPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("p")?;
        for i in &self.0 {
            write!(f, ".{i}")?;
        }
        Ok(())
    }
}

pub(crate) fn format_options(bits: u32) -> String {
    let opts = Options::from_bits_retain(bits);
    let mut names: Vec<String> = opts.iter_names().map(|(n, _)| n.to_string()).collect();
    let unknown = bits & !Options::all().bits();
    if unknown != 0 {
        names.push(format!("{unknown:#x}"));
    }
    if names.is_empty() {
        "-".to_string()
    } else {
        names.join("|")
    }
}

pub(crate) fn format_transfer(kind: &str, t: &Transfer) -> String {
    format!(
        "{kind} child={} local={:#x} remote={:#x} len={:#x} opts={}",
        t.child,
        t.local,
        t.remote,
        t.len,
        format_options(t.options)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_display_and_order() {
        let root = ProcessPath::root();
        let a = root.child(0);
        let b = a.child(3);
        assert_eq!(root.to_string(), "p");
        assert_eq!(b.to_string(), "p.0.3");
        assert!(root < a && a < b && b < root.child(1));
    }

    #[test]
    fn options_render_by_name() {
        assert_eq!(format_options(0), "-");
        assert_eq!(format_options(0b110), "SNAP|START");
        assert_eq!(format_options(1 << 9), "0x200");
    }
}
