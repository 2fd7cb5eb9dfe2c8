use std::collections::HashSet;

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    ecdsa_sign, ecdsa_verify, he_keygen, sha256, sha256_parts, CurveParams, MessageDigest,
};

use super::messages::{AbortCode, RoundMessage, SchnorrProof};
use super::signing::{DeviceSigner, GatewaySigner, SignPhase, SignerStep, SigningSession};
use super::*;

fn rng_pair(seed: u64) -> (ChaCha20Rng, ChaCha20Rng) {
    (
        ChaCha20Rng::seed_from_u64(seed),
        ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1)),
    )
}

fn toy_keys(seed: u64) -> (CurveParams, ThresholdKeyPair) {
    let curve = CurveParams::toy();
    let (mut rd, mut rg) = rng_pair(seed);
    let keys = tkeygen(&curve, &mut rd, &mut rg).expect("keygen completes");
    (curve, keys)
}

fn digest_of(i: u64) -> MessageDigest {
    sha256(&i.to_be_bytes())
}

#[test]
fn keygen_builds_consistent_shares() {
    let (curve, keys) = toy_keys(11);
    assert_eq!(keys.device.joint_public_key, keys.gateway.joint_public_key);
    assert_eq!(keys.device.chain_code, keys.gateway.chain_code);
    assert_eq!(keys.device.role, Party::Device);
    assert_eq!(keys.gateway.role, Party::Gateway);

    // Q equals the product of the two secret factors applied to G.
    let product = curve.scalar_mul(keys.device.share(), keys.gateway.share());
    assert_eq!(curve.mul_g(&product), keys.joint_public_key);

    // The gateway holds an encryption of the device factor and cannot
    // decrypt it; the device holds the decryption key.
    assert!(keys.gateway.he_keys.is_none());
    assert!(keys.device.enc_counterparty_share.is_none());
    let enc = keys
        .gateway
        .enc_counterparty_share
        .as_ref()
        .expect("gateway stores the encrypted device factor");
    let opened = keys
        .device
        .he_keys
        .as_ref()
        .expect("device holds the decryption keypair")
        .decrypt(&enc.ciphertext)
        .expect("decrypts under the device key");
    assert_eq!(&opened, keys.device.share().value());
}

#[test]
fn keygen_joint_key_varies_with_seed() {
    let (_, a) = toy_keys(1);
    let (_, b) = toy_keys(2);
    assert_ne!(a.joint_public_key, b.joint_public_key);
}

#[test]
fn keygen_rejects_reveal_that_breaks_commitment() {
    let curve = CurveParams::toy();
    let (mut rd, mut rg) = rng_pair(21);
    let (mut gateway, first) = KeygenGateway::new(&curve, &mut rg);
    let mut device = KeygenDevice::new(&curve, &mut rd);

    let commit = device.handle(&first).unwrap().unwrap();
    let reveal = gateway.handle(&commit).unwrap().unwrap();
    let mut reveal_device = device.handle(&reveal).unwrap().unwrap();
    match &mut reveal_device {
        RoundMessage::KeygenRevealDevice { point, .. } => {
            *point = curve.add(point, curve.generator());
        }
        other => panic!("unexpected message {other:?}"),
    }
    assert_eq!(
        gateway.handle(&reveal_device),
        Err(ThresholdError::CommitmentMismatch)
    );
}

#[test]
fn keygen_rejects_consistent_commitment_with_forged_proof() {
    // An opening that matches its own commitment still fails without a
    // valid knowledge proof for the revealed point.
    let curve = CurveParams::toy();
    let (mut rd, mut rg) = rng_pair(22);
    let (mut gateway, first) = KeygenGateway::new(&curve, &mut rg);

    let point = curve.mul_g(&curve.random_scalar(&mut rd));
    let forged = SchnorrProof {
        t_point: curve.mul_g(&curve.random_scalar(&mut rd)),
        z: curve.random_scalar(&mut rd),
    };
    let salt = [7u8; 32];
    let commitment = super::keygen::reveal_commitment(&curve, &point, &forged, &salt);
    let he = he_keygen(64, &mut rd);
    let enc_share = he.public().encrypt(&BigUint::from(1u8), &mut rd);

    let _ = first;
    let reveal = gateway
        .handle(&RoundMessage::KeygenCommit { commitment })
        .unwrap()
        .unwrap();
    assert!(matches!(reveal, RoundMessage::KeygenReveal { .. }));
    assert_eq!(
        gateway.handle(&RoundMessage::KeygenRevealDevice {
            point,
            proof: forged,
            salt,
            he_modulus: he.public().modulus().clone(),
            enc_share,
        }),
        Err(ThresholdError::BadProof)
    );
}

#[test]
fn signing_five_hundred_sessions_match_the_single_signer() {
    let (curve, keys) = toy_keys(3);
    let (mut rd, mut rg) = rng_pair(33);
    let joint_secret = curve.scalar_mul(keys.device.share(), keys.gateway.share());

    for i in 0..500u64 {
        let digest = digest_of(i);
        let mut session = SigningSession::new(i, digest);
        let outcome = tsign(
            &curve,
            &mut session,
            Some(&keys.device),
            Some(&keys.gateway),
            &mut rd,
            &mut rg,
        )
        .expect("session completes");

        assert_eq!(session.phase, SignPhase::Complete);
        assert!(matches!(
            session.transcript.last(),
            Some(RoundMessage::SignComplete { .. })
        ));
        assert!(ecdsa_verify(
            &curve,
            &keys.joint_public_key,
            &digest,
            &outcome.signature
        ));

        // The pair of nonces must reproduce the plain single-signer
        // signature for the product key exactly.
        let joint_nonce = curve.scalar_mul(&outcome.device_nonce, &outcome.gateway_nonce);
        let expected = ecdsa_sign(&curve, &joint_secret, &digest, &joint_nonce)
            .expect("nonzero r and s, since the joint session accepted them");
        assert_eq!(outcome.signature, expected, "session {i}");
    }
}

#[test]
fn signing_transcript_is_deterministic_for_fixed_seeds() {
    let run = || {
        let (curve, keys) = toy_keys(5);
        let (mut rd, mut rg) = rng_pair(55);
        let mut session = SigningSession::new(9, digest_of(9));
        let outcome = tsign(
            &curve,
            &mut session,
            Some(&keys.device),
            Some(&keys.gateway),
            &mut rd,
            &mut rg,
        )
        .unwrap();
        let bytes: Vec<u8> = session
            .transcript
            .iter()
            .flat_map(|m| m.encode(&curve).unwrap())
            .collect();
        (bytes, outcome.signature)
    };
    let (b1, s1) = run();
    let (b2, s2) = run();
    assert_eq!(b1, b2);
    assert_eq!(s1, s2);
}

#[test]
fn signing_rejects_tampered_nonce_commitment() {
    let (curve, keys) = toy_keys(7);
    let (mut rd, mut rg) = rng_pair(77);
    let digest = digest_of(1);
    let (mut gw, init) =
        GatewaySigner::start(&curve, &keys.gateway, 4, digest, &mut rg).unwrap();
    let mut dev = DeviceSigner::new(&curve, &keys.device, 4, &mut rd).unwrap();

    let SignerStep::Send(mut commit) = dev.handle(&init).unwrap() else {
        panic!("device must reply with its commitment");
    };
    if let RoundMessage::SignNonceCommit {
        nonce_commitment, ..
    } = &mut commit
    {
        nonce_commitment[0] ^= 1;
    }
    let SignerStep::Send(reveal) = gw.handle(&commit, &mut rg).unwrap() else {
        panic!("gateway must open its nonce");
    };
    let SignerStep::Send(reveal_device) = dev.handle(&reveal).unwrap() else {
        panic!("device must open its nonce");
    };
    assert_eq!(
        gw.handle(&reveal_device, &mut rg),
        Err(ThresholdError::CommitmentMismatch)
    );
    assert_eq!(gw.phase(), SignPhase::Aborted);
}

#[test]
fn signing_rejects_out_of_order_messages() {
    let (curve, keys) = toy_keys(8);
    let (mut rd, mut rg) = rng_pair(88);
    let digest = digest_of(2);

    let mut dev = DeviceSigner::new(&curve, &keys.device, 1, &mut rd).unwrap();
    let he = keys.device.he_keys.as_ref().unwrap();
    let stray = RoundMessage::SignCiphertext {
        session_id: 1,
        ciphertext: he.public().encrypt(&BigUint::from(5u8), &mut rd),
    };
    assert_eq!(dev.handle(&stray), Err(ThresholdError::OutOfPhase));

    let (mut gw, _) = GatewaySigner::start(&curve, &keys.gateway, 2, digest, &mut rg).unwrap();
    let stray = RoundMessage::SignNonceRevealDevice {
        session_id: 2,
        point: curve.generator().clone(),
        salt: [0; 32],
    };
    assert_eq!(gw.handle(&stray, &mut rg), Err(ThresholdError::OutOfPhase));
}

#[test]
fn signing_rejects_mismatched_session_ids() {
    let (curve, keys) = toy_keys(9);
    let (mut rd, mut rg) = rng_pair(99);
    let (_, init) = GatewaySigner::start(&curve, &keys.gateway, 10, digest_of(3), &mut rg).unwrap();
    let mut dev = DeviceSigner::new(&curve, &keys.device, 11, &mut rd).unwrap();
    assert_eq!(dev.handle(&init), Err(ThresholdError::SessionMismatch));
}

#[test]
fn joint_operations_require_both_parties() {
    let (curve, keys) = toy_keys(13);
    let (mut rd, mut rg) = rng_pair(131);

    let cases: [(Option<&KeyShare>, Option<&KeyShare>, Party); 2] = [
        (None, Some(&keys.gateway), Party::Device),
        (Some(&keys.device), None, Party::Gateway),
    ];
    for (device, gateway, missing) in cases {
        let mut session = SigningSession::new(0, digest_of(0));
        assert_eq!(
            tsign(&curve, &mut session, device, gateway, &mut rd, &mut rg).unwrap_err(),
            ThresholdError::PartyAbsent(missing)
        );
        assert_eq!(session.phase, SignPhase::Aborted);
        assert_eq!(
            derive_child(&curve, device, gateway, 0).unwrap_err(),
            ThresholdError::PartyAbsent(missing)
        );
        assert_eq!(
            commitment_point(&curve, device, gateway, 0).unwrap_err(),
            ThresholdError::PartyAbsent(missing)
        );
        assert_eq!(
            reveal_revocation_secret(&curve, device, gateway, 0).unwrap_err(),
            ThresholdError::PartyAbsent(missing)
        );
    }
}

#[test]
fn derive_rejects_shares_from_different_parents() {
    let (curve, a) = toy_keys(14);
    let (_, b) = toy_keys(15);
    assert_eq!(
        derive_child(&curve, Some(&a.device), Some(&b.gateway), 0).unwrap_err(),
        ThresholdError::SessionMismatch
    );
}

#[test]
fn derived_children_sign_under_the_child_key() {
    let (curve, keys) = toy_keys(17);
    let (mut rd, mut rg) = rng_pair(171);
    let child = derive_child(&curve, Some(&keys.device), Some(&keys.gateway), 7).unwrap();

    assert_eq!(
        child.joint_public_key,
        curve.mul(&keys.joint_public_key, &child.tweak)
    );
    // Gateway share carries the tweak, device share is untouched.
    assert_eq!(
        child.gateway.share(),
        &curve.scalar_mul(keys.gateway.share(), &child.tweak)
    );
    assert_eq!(child.device.share(), keys.device.share());

    let digest = digest_of(70);
    let mut session = SigningSession::new(70, digest);
    let outcome = tsign(
        &curve,
        &mut session,
        Some(&child.device),
        Some(&child.gateway),
        &mut rd,
        &mut rg,
    )
    .expect("child shares sign");
    assert!(ecdsa_verify(
        &curve,
        &child.joint_public_key,
        &digest,
        &outcome.signature
    ));
    // And not under the parent key.
    assert!(!ecdsa_verify(
        &curve,
        &keys.joint_public_key,
        &digest,
        &outcome.signature
    ));
}

#[test]
fn commitment_points_are_distinct_and_stable() {
    // Distinctness across states is a property of the production group;
    // the tiny test group birthday-collides almost immediately. Shares
    // are built directly, since derivation needs no Paillier material.
    let curve = CurveParams::secp256k1();
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let x_d = curve.random_scalar(&mut rng);
    let x_g = curve.random_scalar(&mut rng);
    let joint = curve.mul_g(&curve.scalar_mul(&x_d, &x_g));
    let chain = [9u8; 32];
    let device = KeyShare::new(Party::Device, x_d, joint.clone(), chain, None, None);
    let gateway = KeyShare::new(Party::Gateway, x_g, joint, chain, None, None);

    let mut seen = HashSet::new();
    for index in 0..50u64 {
        let point =
            commitment_point(&curve, Some(&device), Some(&gateway), index).expect("derives");
        let again = commitment_point(&curve, Some(&device), Some(&gateway), index)
            .expect("derives identically");
        assert_eq!(point, again);
        assert!(
            seen.insert(curve.point_encode(&point).unwrap()),
            "index {index} repeats an earlier per-state key"
        );
    }
}

#[test]
fn revocation_secret_is_the_full_child_private_key() {
    let (curve, keys) = toy_keys(23);
    for index in [0u64, 1, 2, 144, 9999] {
        let child = derive_child(&curve, Some(&keys.device), Some(&keys.gateway), index).unwrap();
        let secret =
            reveal_revocation_secret(&curve, Some(&keys.device), Some(&keys.gateway), index)
                .expect("both parties cooperate");
        let expected = curve.scalar_mul(
            &child.tweak,
            &curve.scalar_mul(keys.device.share(), keys.gateway.share()),
        );
        assert_eq!(secret, expected);
        assert_eq!(curve.mul_g(&secret), child.joint_public_key);
    }
}

#[test]
fn tweak_derivation_retries_past_zero_hashes() {
    // On the tiny test group roughly one index in n hits a first-round
    // hash that reduces to zero; the derivation must skip it and still
    // return a nonzero tweak, matching the retry hash.
    let (curve, keys) = toy_keys(29);
    let joint = &keys.joint_public_key;
    let chain = &keys.device.chain_code;
    let encoded = curve.point_encode(joint).unwrap();

    let mut hit = None;
    for index in 0..30_000u64 {
        let first = sha256_parts("hd-tweak", &[&encoded, chain, &index.to_be_bytes()]);
        if curve.scalar_from_bytes_reduced(first.as_bytes()).is_zero() {
            hit = Some(index);
            break;
        }
    }
    let index = hit.expect("a zero first-round hash exists in this range for the tiny group");
    let tweak = derive_tweak(&curve, joint, chain, index);
    assert!(!tweak.is_zero());
    let second = sha256_parts("hd-tweak", &[&encoded, chain, &index.to_be_bytes(), &[1u8]]);
    assert_eq!(tweak, curve.scalar_from_bytes_reduced(second.as_bytes()));
}

#[test]
fn round_messages_survive_encoding() {
    let curve = CurveParams::toy();
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let point = curve.mul_g(&curve.random_scalar(&mut rng));
    let proof = SchnorrProof {
        t_point: curve.mul_g(&curve.random_scalar(&mut rng)),
        z: curve.random_scalar(&mut rng),
    };
    let he = he_keygen(64, &mut rng);
    let ciphertext = he.public().encrypt(&BigUint::from(123u32), &mut rng);
    let signature = crate::crypto::EcdsaSignature {
        r: curve.scalar(5u32),
        s: curve.scalar(9u32),
    };

    let messages = vec![
        RoundMessage::KeygenCommit { commitment: [1; 32] },
        RoundMessage::KeygenReveal {
            point: point.clone(),
            proof: proof.clone(),
            salt: [2; 32],
        },
        RoundMessage::KeygenRevealDevice {
            point: point.clone(),
            proof: proof.clone(),
            salt: [3; 32],
            he_modulus: he.public().modulus().clone(),
            enc_share: ciphertext.clone(),
        },
        RoundMessage::KeygenFinish {
            joint_point: point.clone(),
        },
        RoundMessage::KeygenFinishAck {
            joint_point: point.clone(),
        },
        RoundMessage::SignInit {
            session_id: 7,
            digest: [4; 32],
            nonce_commitment: [5; 32],
        },
        RoundMessage::SignNonceCommit {
            session_id: 7,
            nonce_commitment: [6; 32],
        },
        RoundMessage::SignNonceReveal {
            session_id: 7,
            point: point.clone(),
            salt: [7; 32],
        },
        RoundMessage::SignNonceRevealDevice {
            session_id: 7,
            point: point.clone(),
            salt: [8; 32],
        },
        RoundMessage::SignCiphertext {
            session_id: 7,
            ciphertext,
        },
        RoundMessage::SignComplete {
            session_id: 7,
            signature,
        },
        RoundMessage::SignAbort {
            session_id: 7,
            code: AbortCode::ZeroS,
        },
        RoundMessage::DeriveRequest { index: 3 },
        RoundMessage::DeriveConfirm {
            index: 3,
            child_point: point.clone(),
        },
        RoundMessage::RevealRequest { index: 4 },
        RoundMessage::RevealContribution {
            index: 4,
            partial: curve.scalar(11u32),
        },
    ];

    for msg in messages {
        let bytes = msg.encode(&curve).expect("encodable");
        assert_eq!(bytes.len(), msg.wire_len(&curve));
        let back = RoundMessage::decode(&curve, &bytes).expect("decodes");
        assert_eq!(back, msg);

        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(RoundMessage::decode(&curve, &truncated).is_err());
    }
}
