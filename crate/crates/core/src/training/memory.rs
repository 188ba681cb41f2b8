use std::fmt;

/// Bytes per stored number when sizing a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accounting {
    /// 32-bit weights and gradients, two 32-bit Adam moments.
    Fp32,
    /// This crate's own 64-bit storage.
    Native64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub weights: u128,
    pub gradients: u128,
    pub moments: u128,
}

impl MemoryEstimate {
    pub fn total(&self) -> u128 {
        self.weights + self.gradients + self.moments
    }
}

fn gb(bytes: u128) -> String {
    let whole = bytes / 1_000_000_000;
    let frac = bytes % 1_000_000_000;
    if frac == 0 {
        format!("{whole} GB")
    } else {
        format!("{:.3} GB", bytes as f64 / 1e9)
    }
}

impl fmt::Display for MemoryEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "weights:   {} ({} bytes)", gb(self.weights), self.weights)?;
        writeln!(f, "gradients: {} ({} bytes)", gb(self.gradients), self.gradients)?;
        writeln!(f, "moments:   {} ({} bytes)", gb(self.moments), self.moments)?;
        write!(f, "total:     {} ({} bytes)", gb(self.total()), self.total())
    }
}

/// Weights, gradients and Adam moments for `params` parameters.
pub fn estimate_memory(params: u128, accounting: Accounting) -> MemoryEstimate {
    let word = match accounting {
        Accounting::Fp32 => 4,
        Accounting::Native64 => 8,
    };
    MemoryEstimate {
        weights: word * params,
        gradients: word * params,
        moments: 2 * word * params,
    }
}
