//! SPECK32/64: 16-bit words, 4-word key, rotation amounts 7 and 2.
//!
//! Round-reduced variants use the full key schedule truncated to the
//! requested number of subkeys. CBC mode chains 32-bit blocks with a
//! caller-supplied IV.

use std::fmt;

use crate::error::{Error, Result};

/// Full round count for SPECK32/64.
pub const MAX_ROUNDS: usize = 22;
/// Right rotation applied to the left word.
pub const ALPHA: u32 = 7;
/// Left rotation applied to the right word.
pub const BETA: u32 = 2;

/// One 32-bit cipher block as its two 16-bit words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BlockState {
    pub left: u16,
    pub right: u16,
}

impl BlockState {
    pub const fn new(left: u16, right: u16) -> Self {
        BlockState { left, right }
    }

    /// `L` occupies the high half, `R` the low half.
    pub const fn from_u32(block: u32) -> Self {
        BlockState {
            left: (block >> 16) as u16,
            right: block as u16,
        }
    }

    pub const fn to_u32(self) -> u32 {
        ((self.left as u32) << 16) | self.right as u32
    }

    /// Big-endian `L || R`.
    pub fn to_bytes(self) -> [u8; 4] {
        self.to_u32().to_be_bytes()
    }

    pub fn from_bytes(bytes: [u8; 4]) -> Self {
        Self::from_u32(u32::from_be_bytes(bytes))
    }

    fn xor(self, other: BlockState) -> BlockState {
        BlockState::new(self.left ^ other.left, self.right ^ other.right)
    }
}

impl fmt::LowerHex for BlockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.to_u32())
    }
}

/// 64-bit master key, most-significant word first: `(l2, l1, l0, k0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CipherKey {
    pub words: [u16; 4],
}

impl CipherKey {
    pub const fn new(words: [u16; 4]) -> Self {
        CipherKey { words }
    }

    pub fn from_bytes(bytes: [u8; 8]) -> Self {
        let mut words = [0u16; 4];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]);
        }
        CipherKey { words }
    }

    pub fn to_bytes(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        for (i, w) in self.words.iter().enumerate() {
            out[2 * i..2 * i + 2].copy_from_slice(&w.to_be_bytes());
        }
        out
    }

    /// Parses 16 hex digits, optionally prefixed by `0x`, ignoring spaces,
    /// commas and colons.
    pub fn from_hex(s: &str) -> Result<Self> {
        let cleaned: String = s
            .trim()
            .trim_start_matches("0x")
            .chars()
            .filter(|c| !matches!(c, ' ' | ',' | ':'))
            .collect();
        if cleaned.len() != 16 {
            return Err(Error::InvalidKey(s.to_string()));
        }
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&cleaned[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::InvalidKey(s.to_string()))?;
        }
        Ok(Self::from_bytes(bytes))
    }

    pub fn to_hex(self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-round subkeys, `subkeys.len() == rounds`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundKeySchedule {
    subkeys: Vec<u16>,
}

impl RoundKeySchedule {
    pub fn subkeys(&self) -> &[u16] {
        &self.subkeys
    }

    pub fn rounds(&self) -> usize {
        self.subkeys.len()
    }
}

/// A CBC initialization vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct InitializationVector(pub BlockState);

impl InitializationVector {
    pub const fn from_u32(v: u32) -> Self {
        InitializationVector(BlockState::from_u32(v))
    }

    pub const fn to_u32(self) -> u32 {
        self.0.to_u32()
    }
}

pub fn check_rounds(rounds: usize) -> Result<()> {
    if rounds == 0 || rounds > MAX_ROUNDS {
        Err(Error::InvalidRoundCount(rounds))
    } else {
        Ok(())
    }
}

#[inline]
pub fn round_forward(state: BlockState, subkey: u16) -> BlockState {
    let left = state.left.rotate_right(ALPHA).wrapping_add(state.right) ^ subkey;
    let right = state.right.rotate_left(BETA) ^ left;
    BlockState { left, right }
}

#[inline]
pub fn round_inverse(state: BlockState, subkey: u16) -> BlockState {
    let right = (state.right ^ state.left).rotate_right(BETA);
    let left = (state.left ^ subkey).wrapping_sub(right).rotate_left(ALPHA);
    BlockState { left, right }
}

/// Expands `key` into `rounds` subkeys. The schedule reuses the round
/// function with the round index as key, so `key_schedule(k, r)` is a
/// prefix of `key_schedule(k, r + 1)`.
pub fn key_schedule(key: CipherKey, rounds: usize) -> Result<RoundKeySchedule> {
    check_rounds(rounds)?;
    let [l2, l1, l0, k0] = key.words;
    let mut l = Vec::with_capacity(rounds + 2);
    l.extend_from_slice(&[l0, l1, l2]);
    let mut k = k0;
    let mut subkeys = Vec::with_capacity(rounds);
    subkeys.push(k);
    for i in 0..rounds - 1 {
        let next = round_forward(BlockState::new(l[i], k), i as u16);
        l.push(next.left);
        k = next.right;
        subkeys.push(k);
    }
    Ok(RoundKeySchedule { subkeys })
}

pub fn encrypt_block(pt: BlockState, sched: &RoundKeySchedule) -> BlockState {
    sched.subkeys.iter().fold(pt, |s, &k| round_forward(s, k))
}

pub fn decrypt_block(ct: BlockState, sched: &RoundKeySchedule) -> BlockState {
    sched
        .subkeys
        .iter()
        .rev()
        .fold(ct, |s, &k| round_inverse(s, k))
}

/// `C_1 = E(P_1 ^ IV)`, `C_j = E(P_j ^ C_{j-1})`.
pub fn cbc_encrypt(
    pt_blocks: &[BlockState],
    key: CipherKey,
    rounds: usize,
    iv: InitializationVector,
) -> Result<(InitializationVector, Vec<BlockState>)> {
    let sched = key_schedule(key, rounds)?;
    Ok((iv, cbc_encrypt_with(pt_blocks, &sched, iv)?))
}

/// CBC encryption with a precomputed schedule.
pub fn cbc_encrypt_with(
    pt_blocks: &[BlockState],
    sched: &RoundKeySchedule,
    iv: InitializationVector,
) -> Result<Vec<BlockState>> {
    if pt_blocks.is_empty() {
        return Err(Error::EmptyMessage);
    }
    let mut prev = iv.0;
    Ok(pt_blocks
        .iter()
        .map(|&p| {
            prev = encrypt_block(p.xor(prev), sched);
            prev
        })
        .collect())
}

pub fn cbc_decrypt(
    iv: InitializationVector,
    ct_blocks: &[BlockState],
    key: CipherKey,
    rounds: usize,
) -> Result<Vec<BlockState>> {
    let sched = key_schedule(key, rounds)?;
    cbc_decrypt_with(iv, ct_blocks, &sched)
}

pub fn cbc_decrypt_with(
    iv: InitializationVector,
    ct_blocks: &[BlockState],
    sched: &RoundKeySchedule,
) -> Result<Vec<BlockState>> {
    if ct_blocks.is_empty() {
        return Err(Error::EmptyMessage);
    }
    let mut prev = iv.0;
    Ok(ct_blocks
        .iter()
        .map(|&c| {
            let p = decrypt_block(c, sched).xor(prev);
            prev = c;
            p
        })
        .collect())
}
