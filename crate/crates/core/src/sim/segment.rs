//! Segmentation of one encoded MQTT packet across link frames.
//!
//! Tightly framed links (zigbee caps frames at 128 octets) cannot carry a
//! whole PUBLISH in one frame, so the sender splits each packet into frames
//! tagged `[seq_hi, seq_lo, index, count]`. The receiver reassembles by group
//! sequence; losing any segment silently loses the whole packet, which is
//! exactly the per-packet Bernoulli loss the qos-1 retry machinery recovers
//! from. Segments may arrive reordered within the jitter window.

use thiserror::Error;
use std::collections::BTreeMap;

pub const SEGMENT_HEADER_LEN: usize = 4;
/// Incomplete groups retained before the oldest is discarded as lost.
const MAX_PARTIAL_GROUPS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("packet of {size} octets needs more than 255 segments at max_frame {max_frame}")]
    TooManySegments { size: usize, max_frame: usize },
    #[error("max_frame {0} cannot fit the segment header")]
    FrameTooSmall(usize),
    #[error("segment frame malformed: {0}")]
    Malformed(&'static str),
}

/// Splits `packet` into frames of at most `max_frame` octets, all tagged with
/// the same group sequence.
pub fn split(group_seq: u16, packet: &[u8], max_frame: usize) -> Result<Vec<Vec<u8>>, SegmentError> {
    if max_frame <= SEGMENT_HEADER_LEN {
        return Err(SegmentError::FrameTooSmall(max_frame));
    }
    let chunk_size = max_frame - SEGMENT_HEADER_LEN;
    let count = packet.len().div_ceil(chunk_size).max(1);
    if count > 255 {
        return Err(SegmentError::TooManySegments { size: packet.len(), max_frame });
    }
    let mut frames = Vec::with_capacity(count);
    for index in 0..count {
        let start = index * chunk_size;
        let end = (start + chunk_size).min(packet.len());
        let mut frame = Vec::with_capacity(SEGMENT_HEADER_LEN + end - start);
        frame.extend_from_slice(&group_seq.to_be_bytes());
        frame.push(index as u8);
        frame.push(count as u8);
        frame.extend_from_slice(&packet[start..end]);
        frames.push(frame);
    }
    Ok(frames)
}

#[derive(Debug, Clone)]
struct PartialGroup {
    count: usize,
    arrived_order: u64,
    segments: Vec<Option<Vec<u8>>>,
}

/// Per-sender-direction reassembly state.
#[derive(Debug, Clone, Default)]
pub struct Reassembler {
    groups: BTreeMap<u16, PartialGroup>,
    arrivals: u64,
}

impl Reassembler {
    pub fn new() -> Reassembler {
        Reassembler::default()
    }

    /// Accepts one link frame; returns the reassembled packet when its group
    /// completes.
    pub fn accept(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, SegmentError> {
        if frame.len() < SEGMENT_HEADER_LEN {
            return Err(SegmentError::Malformed("frame shorter than the segment header"));
        }
        let group_seq = u16::from_be_bytes([frame[0], frame[1]]);
        let index = frame[2] as usize;
        let count = frame[3] as usize;
        if count == 0 {
            return Err(SegmentError::Malformed("segment count zero"));
        }
        if index >= count {
            return Err(SegmentError::Malformed("segment index beyond count"));
        }
        let group = self.groups.entry(group_seq).or_insert_with(|| {
            self.arrivals += 1;
            PartialGroup { count, arrived_order: self.arrivals, segments: vec![None; count] }
        });
        if group.count != count {
            return Err(SegmentError::Malformed("segment count disagrees within a group"));
        }
        group.segments[index] = Some(frame[SEGMENT_HEADER_LEN..].to_vec());
        if group.segments.iter().all(Option::is_some) {
            let group = self.groups.remove(&group_seq).unwrap();
            let mut packet = Vec::new();
            for segment in group.segments.into_iter().flatten() {
                packet.extend_from_slice(&segment);
            }
            return Ok(Some(packet));
        }
        // A group whose peer segments were lost lingers; cap the backlog by
        // discarding the stalest.
        if self.groups.len() > MAX_PARTIAL_GROUPS {
            let stalest = self
                .groups
                .iter()
                .min_by_key(|(_, g)| g.arrived_order)
                .map(|(&seq, _)| seq)
                .unwrap();
            self.groups.remove(&stalest);
        }
        Ok(None)
    }

    pub fn pending_groups(&self) -> usize {
        self.groups.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_segment_round_trip() {
        let packet = b"small".to_vec();
        let frames = split(1, &packet, 128).unwrap();
        assert_eq!(frames.len(), 1);
        let mut r = Reassembler::new();
        assert_eq!(r.accept(&frames[0]).unwrap(), Some(packet));
    }

    #[test]
    fn multi_segment_round_trip() {
        let packet: Vec<u8> = (0..=255u16).flat_map(|x| x.to_be_bytes()).collect();
        let frames = split(7, &packet, 128).unwrap();
        assert!(frames.len() > 1);
        assert!(frames.iter().all(|f| f.len() <= 128));
        let mut r = Reassembler::new();
        let mut out = None;
        for frame in &frames {
            out = r.accept(frame).unwrap();
        }
        assert_eq!(out, Some(packet));
    }

    #[test]
    fn reordered_segments_reassemble() {
        let packet: Vec<u8> = (0..300u32).map(|x| x as u8).collect();
        let mut frames = split(9, &packet, 128).unwrap();
        frames.reverse();
        let mut r = Reassembler::new();
        let mut out = None;
        for frame in &frames {
            out = r.accept(frame).unwrap();
        }
        assert_eq!(out, Some(packet));
    }

    #[test]
    fn missing_segment_never_completes() {
        let packet = vec![0xAB; 400];
        let frames = split(3, &packet, 128).unwrap();
        let mut r = Reassembler::new();
        for frame in &frames[1..] {
            assert_eq!(r.accept(frame).unwrap(), None);
        }
        assert_eq!(r.pending_groups(), 1);
    }

    #[test]
    fn interleaved_groups_complete_independently() {
        let a = vec![1u8; 300];
        let b = vec![2u8; 300];
        let fa = split(10, &a, 128).unwrap();
        let fb = split(11, &b, 128).unwrap();
        let mut r = Reassembler::new();
        let mut done = Vec::new();
        for (x, y) in fa.iter().zip(fb.iter()) {
            if let Some(p) = r.accept(x).unwrap() {
                done.push(p);
            }
            if let Some(p) = r.accept(y).unwrap() {
                done.push(p);
            }
        }
        assert_eq!(done, vec![a, b]);
    }

    #[test]
    fn oversized_packet_rejected() {
        let packet = vec![0u8; 124 * 256 + 1];
        assert!(matches!(split(0, &packet, 128), Err(SegmentError::TooManySegments { .. })));
    }

    #[test]
    fn stale_groups_evicted() {
        let mut r = Reassembler::new();
        for seq in 0..200u16 {
            let frames = split(seq, &[0u8; 300], 128).unwrap();
            // Only the first segment ever arrives.
            r.accept(&frames[0]).unwrap();
        }
        assert!(r.pending_groups() <= MAX_PARTIAL_GROUPS + 1);
    }
}
