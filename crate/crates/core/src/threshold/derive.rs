//! Hierarchical child keys over a multiplicatively shared parent.
//!
//! A public tweak t(i) is hashed from the joint key, the shared chain
//! code, and the child index. The gateway scales its factor by the
//! tweak, the device keeps its factor, and the joint child key is
//! t(i) * Q, so signing under a child needs both parties exactly as the
//! parent does. Revealing the product t(i) * x_d * x_g for a spent state
//! hands the counterparty the full private key for that state's
//! revocation path without touching any other state.

use crate::crypto::{sha256_parts, CurveParams, GroupPoint, Scalar};

use super::{KeyShare, Party, ThresholdError};

/// Public tweak for child `index`. Rejects the (never observed in
/// practice) zero hash by appending a retry counter byte.
pub fn derive_tweak(
    curve: &CurveParams,
    joint: &GroupPoint,
    chain_code: &[u8; 32],
    index: u64,
) -> Scalar {
    let encoded = curve.point_encode(joint).unwrap_or_default();
    let index_bytes = index.to_be_bytes();
    for attempt in 0u16..=255 {
        let digest = if attempt == 0 {
            sha256_parts("hd-tweak", &[&encoded, chain_code, &index_bytes])
        } else {
            sha256_parts(
                "hd-tweak",
                &[&encoded, chain_code, &index_bytes, &[attempt as u8]],
            )
        };
        let tweak = curve.scalar_from_bytes_reduced(digest.as_bytes());
        if !tweak.is_zero() {
            return tweak;
        }
    }
    unreachable!("256 consecutive zero tweaks")
}

/// Both parties' shares of one child key, plus the public tweak that
/// produced it.
#[derive(Clone, Debug)]
pub struct ChildShares {
    pub device: KeyShare,
    pub gateway: KeyShare,
    pub tweak: Scalar,
    pub joint_public_key: GroupPoint,
}

/// Derives child `index` for both parties at once. Fails if either
/// share is absent or the two shares describe different parents.
pub fn derive_child(
    curve: &CurveParams,
    device: Option<&KeyShare>,
    gateway: Option<&KeyShare>,
    index: u64,
) -> Result<ChildShares, ThresholdError> {
    let device = device.ok_or(ThresholdError::PartyAbsent(Party::Device))?;
    let gateway = gateway.ok_or(ThresholdError::PartyAbsent(Party::Gateway))?;
    if device.role != Party::Device || gateway.role != Party::Gateway {
        return Err(ThresholdError::SessionMismatch);
    }
    if device.joint_public_key != gateway.joint_public_key
        || device.chain_code != gateway.chain_code
    {
        return Err(ThresholdError::SessionMismatch);
    }
    let tweak = derive_tweak(curve, &device.joint_public_key, &device.chain_code, index);
    let child_device = device.child(curve, index);
    let child_gateway = gateway.child(curve, index);
    debug_assert_eq!(child_device.joint_public_key, child_gateway.joint_public_key);
    let joint_public_key = child_device.joint_public_key.clone();
    Ok(ChildShares {
        device: child_device,
        gateway: child_gateway,
        tweak,
        joint_public_key,
    })
}

/// The per-state public key used to lock a commitment's revocation
/// path: the joint child key at `state_index`.
pub fn commitment_point(
    curve: &CurveParams,
    device: Option<&KeyShare>,
    gateway: Option<&KeyShare>,
    state_index: u64,
) -> Result<GroupPoint, ThresholdError> {
    derive_child(curve, device, gateway, state_index).map(|c| c.joint_public_key)
}

/// Joint disclosure of a spent state's full child private key,
/// t(i) * x_d * x_g. Each party contributes its factor; the result is
/// checked against the public child key before being released.
pub fn reveal_revocation_secret(
    curve: &CurveParams,
    device: Option<&KeyShare>,
    gateway: Option<&KeyShare>,
    state_index: u64,
) -> Result<Scalar, ThresholdError> {
    let shares = derive_child(curve, device, gateway, state_index)?;
    // The device's contribution is t(i) * x_d; the gateway folds in its
    // own factor. The gateway child share already carries the tweak.
    let device_partial = curve.scalar_mul(shares.device.share(), &shares.tweak);
    let secret = curve.scalar_mul(&device_partial, gateway
        .expect("checked by derive_child")
        .share());
    if curve.mul_g(&secret) != shares.joint_public_key {
        return Err(ThresholdError::BadSignature);
    }
    Ok(secret)
}
