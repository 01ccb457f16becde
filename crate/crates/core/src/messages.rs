//! Values exchanged between clients and the server in one round.

use crate::matrix::Matrix;

/// Which of the round's two batches a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchKind {
    /// The mini-batch used for parameter updates.
    Train,
    /// The held-out batch used only for contribution scoring.
    Eval,
}

/// A client's forward output as transmitted to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub client: usize,
    pub values: Matrix,
    /// True when DP noise was added before transmission.
    pub noisy: bool,
}

/// Upload from a client, as seen on the wire.
#[derive(Debug, Clone, Copy)]
pub struct Upload<'a> {
    pub round: usize,
    pub kind: BatchKind,
    /// Provenance tag: the client whose features produced the payload.
    pub origin: usize,
    pub sample_indices: &'a [usize],
    pub activation: &'a ActivationBatch,
}

/// Gradient slice sent by the server to one client.
#[derive(Debug, Clone, Copy)]
pub struct GradientMessage<'a> {
    pub round: usize,
    pub recipient: usize,
    /// Provenance tag: the client whose activation columns this slice covers.
    pub origin: usize,
    pub sample_indices: &'a [usize],
    pub gradient: &'a Matrix,
}

/// Passive hook on protocol traffic. Attack proxies and instrumentation
/// tests observe a run through this trait without touching the protocol.
pub trait RoundObserver {
    fn on_upload(&mut self, _upload: &Upload<'_>) {}
    fn on_gradient(&mut self, _message: &GradientMessage<'_>) {}
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl RoundObserver for NoObserver {}
