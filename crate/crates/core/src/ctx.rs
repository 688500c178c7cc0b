//! Forward-pass mode plus optional instrumentation of gates and softmaxes.

use std::cell::RefCell;
use std::rc::Rc;

use cbhvt_tensor::Tensor;

/// Running extrema of values observed during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub gate_min: f64,
    pub gate_max: f64,
    pub gate_count: usize,
    pub softmax_rows: usize,
    /// Largest `|row sum - 1|` over all softmax rows seen.
    pub softmax_max_deviation: f64,
}

impl Default for Probe {
    fn default() -> Self {
        Self {
            gate_min: f64::INFINITY,
            gate_max: f64::NEG_INFINITY,
            gate_count: 0,
            softmax_rows: 0,
            softmax_max_deviation: 0.0,
        }
    }
}

impl Probe {
    /// Every recorded gate lies strictly inside (0, 1).
    pub fn gates_in_open_unit_interval(&self) -> bool {
        self.gate_count > 0 && self.gate_min > 0.0 && self.gate_max < 1.0
    }

    pub fn merge(&mut self, other: &Probe) {
        self.gate_min = self.gate_min.min(other.gate_min);
        self.gate_max = self.gate_max.max(other.gate_max);
        self.gate_count += other.gate_count;
        self.softmax_rows += other.softmax_rows;
        self.softmax_max_deviation = self.softmax_max_deviation.max(other.softmax_max_deviation);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ctx {
    pub train: bool,
    probe: Option<Rc<RefCell<Probe>>>,
}

impl Ctx {
    pub fn train() -> Self {
        Self { train: true, probe: None }
    }

    pub fn eval() -> Self {
        Self { train: false, probe: None }
    }

    pub fn probed(mut self) -> Self {
        self.probe = Some(Rc::default());
        self
    }

    /// Same instrumentation, different mode.
    pub fn with_train(&self, train: bool) -> Self {
        Self {
            train,
            probe: self.probe.clone(),
        }
    }

    pub fn probe(&self) -> Option<Probe> {
        self.probe.as_ref().map(|p| p.borrow().clone())
    }

    pub(crate) fn record_gates(&self, gates: &Tensor) {
        if let Some(p) = &self.probe {
            let mut p = p.borrow_mut();
            for &v in gates.value().data() {
                p.gate_min = p.gate_min.min(v);
                p.gate_max = p.gate_max.max(v);
            }
            p.gate_count += gates.len();
        }
    }

    /// Records row sums of a softmax taken over the last axis.
    pub(crate) fn record_softmax(&self, probs: &Tensor) {
        if let Some(p) = &self.probe {
            let mut p = p.borrow_mut();
            let d = probs.shape().last().copied().unwrap_or(1).max(1);
            for row in probs.value().data().chunks(d) {
                let dev = (row.iter().sum::<f64>() - 1.0).abs();
                p.softmax_max_deviation = p.softmax_max_deviation.max(dev);
                p.softmax_rows += 1;
            }
        }
    }
}
