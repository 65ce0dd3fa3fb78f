use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::paillier::{Ciphertext, EncryptedVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    PartyUpload,
    AggregateToSecurity,
    Broadcast,
    ScalarUpload,
    ScalarBroadcast,
    /// Cloud-to-party feedback during collaborative gain design.
    CloudFeedback,
    /// Party-to-cloud matrix products during collaborative gain design.
    PartyProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Party(usize),
    Cloud,
    Security,
}

/// Row-major dense matrix with a label naming the quantity it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedMatrix {
    pub fn new(name: impl Into<String>, m: &Matrix) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { name: name.into(), rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Option<Matrix> {
        (self.data.len() == self.rows * self.cols)
            .then(|| Matrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Payload {
    Ciphertexts(EncryptedVector),
    Ciphertext(Ciphertext),
    Vector(Vec<f64>),
    Scalar(f64),
    Matrices(Vec<NamedMatrix>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub k: u64,
    pub sender: Role,
    pub payload: Payload,
}

impl RoundMessage {
    pub fn new(kind: MessageKind, k: u64, sender: Role, payload: Payload) -> Self {
        Self { kind, k, sender, payload }
    }
}

/// Shared, append-only record of every message sent. A disabled log drops
/// messages; long Monte-Carlo runs use it to avoid unbounded growth.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    entries: Option<Arc<Mutex<Vec<RoundMessage>>>>,
}

impl MessageLog {
    pub fn enabled() -> Self {
        Self { entries: Some(Arc::default()) }
    }

    pub fn disabled() -> Self {
        Self { entries: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.entries.is_some()
    }

    pub fn record(&self, msg: &RoundMessage) {
        if let Some(entries) = &self.entries {
            entries.lock().expect("message log poisoned").push(msg.clone());
        }
    }

    pub fn snapshot(&self) -> Vec<RoundMessage> {
        self.entries.as_ref().map(|e| e.lock().expect("message log poisoned").clone()).unwrap_or_default()
    }

    pub fn of_kind(&self, kind: MessageKind) -> Vec<RoundMessage> {
        self.snapshot().into_iter().filter(|m| m.kind == kind).collect()
    }
}
