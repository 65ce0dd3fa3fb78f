use crate::matrix::{Matrix, Vector};
use crate::paillier::{Ciphertext, EncryptedVector, FixedPointCodec, PaillierError, PrivateKey, PublicKey};
use crate::sim::PartyModel;

use super::{ProtocolError, Result};

/// A party's filter state between rounds.
#[derive(Debug, Clone)]
pub struct PartyState {
    party: PartyModel,
    /// `x̂_i(k)`, the fused estimate after the last round.
    estimate: Vector,
    /// `x̂_i⁻(k)`, the local update uploaded in the last round.
    local: Vector,
}

impl PartyState {
    pub fn new(party: PartyModel, initial_estimate: Vector) -> Result<Self> {
        if initial_estimate.len() != party.state_dim() {
            return Err(ProtocolError::Config(format!(
                "party {}: initial estimate has length {}, expected {}",
                party.id(),
                initial_estimate.len(),
                party.state_dim()
            )));
        }
        let local = initial_estimate.clone();
        Ok(Self { party, estimate: initial_estimate, local })
    }

    pub fn party(&self) -> &PartyModel {
        &self.party
    }

    pub fn id(&self) -> usize {
        self.party.id()
    }

    pub fn estimate(&self) -> &Vector {
        &self.estimate
    }

    pub fn local(&self) -> &Vector {
        &self.local
    }

    /// Computes and stores `x̂_i⁻(k)` from `y_i(k)`.
    pub fn update(&mut self, y: &Vector, a: &Matrix) -> Result<&Vector> {
        self.local = local_predict_update(self, y, a)?;
        Ok(&self.local)
    }

    /// Replaces the estimate with the broadcast `x̄(k)`.
    pub fn fuse(&mut self, fused: &[f64]) -> Result<()> {
        if fused.len() != self.estimate.len() {
            return Err(ProtocolError::Config(format!(
                "broadcast has length {}, state has {}",
                fused.len(),
                self.estimate.len()
            )));
        }
        self.estimate.copy_from_slice(fused);
        Ok(())
    }
}

/// `x̂_i⁻(k) = A·x̂_i(k−1) + K_i(y_i(k) − C_i·A·x̂_i(k−1))`.
pub fn local_predict_update(state: &PartyState, y: &Vector, a: &Matrix) -> Result<Vector> {
    let party = &state.party;
    let gain = party.gain().ok_or_else(|| ProtocolError::Config(format!("party {} has no gain", party.id())))?;
    let n = state.estimate.len();
    if a.nrows() != n || a.ncols() != n {
        return Err(ProtocolError::Config(format!("A is {}x{}, state has length {n}", a.nrows(), a.ncols())));
    }
    if y.len() != party.outputs() {
        return Err(ProtocolError::Config(format!(
            "party {}: measurement has length {}, expected {}",
            party.id(),
            y.len(),
            party.outputs()
        )));
    }
    let predicted = a * &state.estimate;
    let innovation = y - party.c() * &predicted;
    Ok(predicted + gain * innovation)
}

/// The untrusted aggregator. It holds only the public key, so it can add
/// ciphertexts but cannot open them:
///
/// ```compile_fail
/// fn peek(cloud: &secfuse::protocol::CloudServer, c: &secfuse::paillier::Ciphertext) {
///     let _ = cloud.public_key().decrypt(c);
/// }
/// ```
#[derive(Debug, Clone)]
pub struct CloudServer {
    key: PublicKey,
}

impl CloudServer {
    pub fn new(key: PublicKey) -> Self {
        Self { key }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.key
    }

    /// Homomorphic component-wise sum of all uploads.
    pub fn aggregate(&self, uploads: &[&EncryptedVector]) -> Result<EncryptedVector> {
        let (first, rest) = uploads.split_first().ok_or_else(|| ProtocolError::Config("no uploads to aggregate".into()))?;
        for c in uploads.iter().flat_map(|u| &u.components) {
            self.key.validate_ciphertext(c)?;
        }
        let mut acc = (*first).clone();
        for u in rest {
            acc = self.key.add_vectors(&acc, u)?;
        }
        Ok(acc)
    }

    pub fn aggregate_scalar(&self, uploads: &[&Ciphertext]) -> Result<Ciphertext> {
        for c in uploads {
            self.key.validate_ciphertext(c)?;
        }
        self.key.sum(uploads.iter().copied()).ok_or_else(|| ProtocolError::Config("no uploads to aggregate".into()))
    }
}

/// The trusted decryptor. It sees one aggregate per round and nothing else.
#[derive(Debug, Clone)]
pub struct SecurityModule {
    key: PrivateKey,
    codec: FixedPointCodec,
}

impl SecurityModule {
    pub fn new(key: PrivateKey, codec: FixedPointCodec) -> Self {
        Self { key, codec }
    }

    /// Decrypts the aggregate and divides by the party count.
    pub fn average(&self, aggregate: &EncryptedVector, parties: usize) -> Result<Vec<f64>> {
        Ok(self.key.decrypt_vector(&self.codec, aggregate, parties)?)
    }

    pub fn average_scalar(&self, aggregate: &Ciphertext, parties: usize) -> Result<f64> {
        let m = self.key.decrypt(aggregate)?;
        Ok(self.codec.decode(&m, parties)?)
    }
}

/// Rejects a value whose N-fold sum could leave the codec range.
pub(crate) fn check_range(codec: &FixedPointCodec, values: &[f64], parties: usize) -> Result<()> {
    let bound = codec.max_magnitude() / parties as f64;
    for &x in values {
        if !x.is_finite() {
            return Err(PaillierError::NonFinite.into());
        }
        if x.abs() >= bound {
            return Err(ProtocolError::Range { value: x, bound });
        }
    }
    Ok(())
}
