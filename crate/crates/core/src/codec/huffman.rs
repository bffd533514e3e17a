//! Canonical prefix coding for quantization code streams.
//!
//! The table travels with the stream as (symbol, code length) pairs, so a
//! payload decodes without any external dictionary. Codes are canonical
//! (assigned in (length, symbol) order, MSB first), which makes encoding a
//! pure function of the symbol frequencies.

use crate::error::{Error, Result};
use crate::wire::{ByteReader, ByteWriter};

/// Longest admissible code. Huffman depth is bounded by ~1.44·log2(n) for n
/// symbols, far below this for any volume that fits in memory. Must stay
/// ≤ 56 so a code plus the writer's ≤7 carried bits fits in a u64.
const MAX_CODE_LEN: u8 = 56;

/// Entropy-codes `symbols`; every symbol must be < `alphabet_size`.
pub fn encode(symbols: &[u32], alphabet_size: u32) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Err(Error::Data("cannot entropy-code an empty stream".into()));
    }
    let mut freqs = vec![0u64; alphabet_size as usize];
    for &s in symbols {
        let slot = freqs
            .get_mut(s as usize)
            .ok_or_else(|| Error::Data(format!("symbol {s} outside alphabet {alphabet_size}")))?;
        *slot += 1;
    }

    let lengths = code_lengths(&freqs)?;
    let canon = CanonicalCodes::from_lengths(&lengths);

    let mut w = ByteWriter::new();
    w.u32(canon.entries.len() as u32);
    for &(sym, len) in &canon.entries {
        w.u32(sym);
        w.u8(len);
    }
    w.u64(symbols.len() as u64);

    let mut bits = BitWriter::new();
    for &s in symbols {
        let (code, len) = canon.codes[s as usize];
        bits.push(code, len);
    }
    let payload = rle_pack(&bits.finish());
    w.u64(payload.len() as u64);
    w.bytes(&payload);
    Ok(w.into_bytes())
}

/// Decodes a stream produced by [`encode`]; returns the exact symbol sequence.
pub fn decode(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut r = ByteReader::new(bytes, "code stream");
    let n_entries = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let sym = r.u32()?;
        let len = r.u8()?;
        if len == 0 || len > MAX_CODE_LEN {
            return Err(Error::Format(format!("invalid code length {len}")));
        }
        entries.push((sym, len));
    }
    let n_codes = r.u64()? as usize;
    let bit_bytes = r.u64()? as usize;
    let payload = rle_unpack(r.bytes(bit_bytes)?)?;
    r.expect_end()?;

    let table = DecodeTable::build(&entries)?;
    let mut bits = BitReader::new(&payload);
    let mut out = Vec::with_capacity(n_codes);
    for _ in 0..n_codes {
        out.push(table.next_symbol(&mut bits)?);
    }
    Ok(out)
}

/// Byte-level run-length wrap for the bit payload. Near-constant volumes
/// quantize to one dominant code whose bitstream is a long byte run; plain
/// prefix coding floors at one bit per element, this collapses the runs.
/// Mode byte 0 = raw, 1 = (run length, byte) pairs; whichever is smaller.
fn rle_pack(bytes: &[u8]) -> Vec<u8> {
    let mut runs: Vec<(u8, u8)> = Vec::new();
    for &b in bytes {
        match runs.last_mut() {
            Some((count, byte)) if *byte == b && *count < u8::MAX => *count += 1,
            _ => runs.push((1, b)),
        }
    }
    if 2 * runs.len() < bytes.len() {
        let mut out = Vec::with_capacity(1 + 2 * runs.len());
        out.push(1);
        for (count, byte) in runs {
            out.push(count);
            out.push(byte);
        }
        out
    } else {
        let mut out = Vec::with_capacity(1 + bytes.len());
        out.push(0);
        out.extend_from_slice(bytes);
        out
    }
}

fn rle_unpack(packed: &[u8]) -> Result<Vec<u8>> {
    match packed.split_first() {
        Some((0, rest)) => Ok(rest.to_vec()),
        Some((1, rest)) => {
            if rest.len() % 2 != 0 {
                return Err(Error::Format("dangling run-length pair".into()));
            }
            let mut out = Vec::new();
            for pair in rest.chunks_exact(2) {
                if pair[0] == 0 {
                    return Err(Error::Format("zero-length run".into()));
                }
                out.extend(std::iter::repeat_n(pair[1], pair[0] as usize));
            }
            Ok(out)
        }
        Some((mode, _)) => Err(Error::Format(format!("unknown stream mode {mode}"))),
        None => Err(Error::Format("empty bit payload".into())),
    }
}

/// Huffman code lengths from frequencies via the sorted two-queue method.
/// Deterministic: leaf ties break on symbol value, merge ties prefer leaves.
fn code_lengths(freqs: &[u64]) -> Result<Vec<(u32, u8)>> {
    let mut leaves: Vec<(u64, u32)> = freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 0)
        .map(|(s, &f)| (f, s as u32))
        .collect();
    if leaves.is_empty() {
        return Err(Error::Data("no symbols to code".into()));
    }
    if leaves.len() == 1 {
        return Ok(vec![(leaves[0].1, 1)]);
    }
    leaves.sort_unstable();

    // Node arena: first the leaves in sorted order, then internal nodes.
    let n_leaves = leaves.len();
    let mut node_freq: Vec<u64> = leaves.iter().map(|&(f, _)| f).collect();
    let mut children: Vec<Option<(usize, usize)>> = vec![None; n_leaves];

    let mut leaf_pos = 0usize;
    let mut merge_pos = n_leaves; // internal nodes occupy indices n_leaves..
    let mut merged: Vec<usize> = Vec::with_capacity(n_leaves - 1);
    let take = |leaf_pos: &mut usize,
                merge_idx: &mut usize,
                node_freq: &Vec<u64>,
                merged: &Vec<usize>|
     -> usize {
        let leaf_ok = *leaf_pos < n_leaves;
        let merge_ok = *merge_idx < merged.len();
        let use_leaf = match (leaf_ok, merge_ok) {
            (true, true) => node_freq[*leaf_pos] <= node_freq[merged[*merge_idx]],
            (true, false) => true,
            (false, true) => false,
            (false, false) => unreachable!("queues exhausted mid-merge"),
        };
        if use_leaf {
            let idx = *leaf_pos;
            *leaf_pos += 1;
            idx
        } else {
            let idx = merged[*merge_idx];
            *merge_idx += 1;
            idx
        }
    };

    let mut merge_idx = 0usize;
    for _ in 0..n_leaves - 1 {
        let a = take(&mut leaf_pos, &mut merge_idx, &node_freq, &merged);
        let b = take(&mut leaf_pos, &mut merge_idx, &node_freq, &merged);
        node_freq.push(node_freq[a] + node_freq[b]);
        children.push(Some((a, b)));
        merged.push(merge_pos);
        merge_pos += 1;
    }

    // Depth of each leaf = code length.
    let root = children.len() - 1;
    let mut depth = vec![0u8; children.len()];
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if let Some((a, b)) = children[node] {
            let d = depth[node] + 1;
            if d > MAX_CODE_LEN {
                return Err(Error::Data("prefix code deeper than supported".into()));
            }
            depth[a] = d;
            depth[b] = d;
            stack.push(a);
            stack.push(b);
        }
    }

    Ok(leaves
        .iter()
        .enumerate()
        .map(|(i, &(_, sym))| (sym, depth[i]))
        .collect())
}

struct CanonicalCodes {
    /// (symbol, length) sorted by (length, symbol); the serialized table.
    entries: Vec<(u32, u8)>,
    /// Dense map symbol -> (code bits, length).
    codes: Vec<(u64, u8)>,
}

impl CanonicalCodes {
    fn from_lengths(lengths: &[(u32, u8)]) -> Self {
        let mut entries = lengths.to_vec();
        entries.sort_unstable_by_key(|&(sym, len)| (len, sym));
        let max_sym = entries.iter().map(|&(s, _)| s).max().unwrap_or(0);
        let mut codes = vec![(0u64, 0u8); max_sym as usize + 1];
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for &(sym, len) in &entries {
            code <<= len - prev_len;
            codes[sym as usize] = (code, len);
            code += 1;
            prev_len = len;
        }
        Self { entries, codes }
    }
}

struct DecodeTable {
    /// Symbols sorted by (length, symbol).
    symbols: Vec<u32>,
    /// Per length: (first canonical code, first index into `symbols`, count).
    rows: Vec<(u64, usize, usize)>,
    max_len: u8,
}

impl DecodeTable {
    fn build(entries: &[(u32, u8)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Format("empty code table".into()));
        }
        let mut sorted = entries.to_vec();
        sorted.sort_unstable_by_key(|&(sym, len)| (len, sym));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Format(format!(
                    "symbol {} listed twice in code table",
                    pair[0].0
                )));
            }
        }
        let max_len = sorted.last().unwrap().1;
        // Kraft sum must not exceed 1 or the canonical codes overflow.
        let mut kraft = 0u128;
        for &(_, len) in &sorted {
            kraft += 1u128 << (MAX_CODE_LEN - len);
        }
        if kraft > 1u128 << MAX_CODE_LEN {
            return Err(Error::Format("code table violates the Kraft inequality".into()));
        }

        let symbols: Vec<u32> = sorted.iter().map(|&(s, _)| s).collect();
        let mut rows = vec![(0u64, 0usize, 0usize); max_len as usize + 1];
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for (i, &(_, len)) in sorted.iter().enumerate() {
            code <<= len - prev_len;
            if rows[len as usize].2 == 0 {
                rows[len as usize].0 = code;
                rows[len as usize].1 = i;
            }
            rows[len as usize].2 += 1;
            code += 1;
            prev_len = len;
        }
        Ok(Self {
            symbols,
            rows,
            max_len,
        })
    }

    fn next_symbol(&self, bits: &mut BitReader) -> Result<u32> {
        let mut code = 0u64;
        for len in 1..=self.max_len {
            code = (code << 1) | bits.next_bit()? as u64;
            let (first_code, first_idx, count) = self.rows[len as usize];
            if count > 0 && code >= first_code && code < first_code + count as u64 {
                return Ok(self.symbols[first_idx + (code - first_code) as usize]);
            }
        }
        Err(Error::Corrupt("bit pattern matches no code".into()))
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    n_bits: u8,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            acc: 0,
            n_bits: 0,
        }
    }

    fn push(&mut self, code: u64, len: u8) {
        debug_assert!(len > 0 && len <= MAX_CODE_LEN);
        self.acc = (self.acc << len) | code;
        self.n_bits += len;
        while self.n_bits >= 8 {
            self.n_bits -= 8;
            self.bytes.push((self.acc >> self.n_bits) as u8);
        }
        self.acc &= (1 << self.n_bits) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n_bits > 0 {
            self.bytes.push((self.acc << (8 - self.n_bits)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit: u8,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            bit: 0,
        }
    }

    #[inline]
    fn next_bit(&mut self) -> Result<u8> {
        let byte = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Format("bit stream exhausted mid-code".into()))?;
        let b = (byte >> (7 - self.bit)) & 1;
        self.bit += 1;
        if self.bit == 8 {
            self.bit = 0;
            self.pos += 1;
        }
        Ok(b)
    }
}
