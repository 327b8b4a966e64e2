//! Per-iteration metric traces and their CSV form.

use nalgebra::DMatrix;
use serde::Serialize;

pub const SCHEMA_HEADER: &str = "# schema_version=1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub comm_rounds: u64,
    pub grad_calls: u64,
    pub f_residual: f64,
    pub consensus_error: f64,
    /// Zeroth-order value calls (sliding family only).
    pub zo_calls: u64,
    /// Smooth-part gradient calls (sliding family only).
    pub smooth_grad_calls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Primal,
    Sliding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: RecordKind,
    pub rows: Vec<TraceRow>,
    /// Final iterate, one row per node (a single row for centralized runs).
    pub final_state: DMatrix<f64>,
}

impl RunRecord {
    pub fn new(kind: RecordKind) -> Self {
        Self { kind, rows: Vec::new(), final_state: DMatrix::zeros(0, 0) }
    }

    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// First row with both the residual and the consensus error at most `eps`.
    pub fn first_reaching(&self, eps: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.f_residual <= eps && r.consensus_error <= eps)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SCHEMA_HEADER);
        s.push('\n');
        match self.kind {
            RecordKind::Primal => {
                s.push_str("iter,comm_rounds,grad_calls,f_residual,consensus_error\n");
                for r in &self.rows {
                    s.push_str(&format!(
                        "{},{},{},{},{}\n",
                        r.iter, r.comm_rounds, r.grad_calls, r.f_residual, r.consensus_error
                    ));
                }
            }
            RecordKind::Sliding => {
                s.push_str("iter,comm_rounds,grad_calls,f_residual,consensus_error,zo_calls,smooth_grad_calls\n");
                for r in &self.rows {
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        r.iter, r.comm_rounds, r.grad_calls, r.f_residual, r.consensus_error, r.zo_calls, r.smooth_grad_calls
                    ));
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualTraceRow {
    pub iter: usize,
    pub comm_rounds: u64,
    pub conj_calls: u64,
    pub grad_norm: f64,
    pub psi: f64,
    pub gap: f64,
    pub ax_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DualRunRecord {
    pub rows: Vec<DualTraceRow>,
}

impl DualRunRecord {
    pub fn last(&self) -> Option<&DualTraceRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SCHEMA_HEADER}\niter,comm_rounds,conj_calls,grad_norm,gap,ax_norm\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.iter, r.comm_rounds, r.conj_calls, r.grad_norm, r.gap, r.ax_norm));
        }
        s
    }
}
