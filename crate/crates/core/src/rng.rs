//! Keyed random streams.
//!
//! Every random draw in a simulation comes from a ChaCha stream keyed by the
//! master seed, with the stream id derived from `(purpose, round, client)`.
//! Two draws with different keys never share state, so the order in which
//! clients are processed (or the number of worker threads) cannot change any
//! value.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Stream = ChaCha20Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    SynthData = 3,
    Schedule = 4,
    ClientNoise = 5,
    ServerNoise = 6,
    Probe = 7,
    Audit = 8,
    SynthTest = 9,
}

const ROUND_BITS: u32 = 24;
const CLIENT_BITS: u32 = 32;

/// Opens the stream for `(master, purpose, round, client)`.
///
/// Rounds must fit in 24 bits and clients in 32 bits.
pub fn stream(master: u64, purpose: Purpose, round: u64, client: u64) -> Stream {
    debug_assert!(round < (1 << ROUND_BITS));
    debug_assert!(client < (1 << CLIENT_BITS));
    let id = ((purpose as u64) << (ROUND_BITS + CLIENT_BITS))
        | ((round & ((1 << ROUND_BITS) - 1)) << CLIENT_BITS)
        | (client & ((1 << CLIENT_BITS) - 1));
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(id);
    rng
}
