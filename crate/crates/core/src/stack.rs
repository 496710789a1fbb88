//! User plane: PDCP with IP and non-IP pipelines, RLC unacknowledged mode,
//! MAC buffering with HARQ bookkeeping, and a round-robin Uu link.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::NodeId;
use crate::error::{Result, SimError};
use crate::facilities::{Destination, MessageKind, Pipeline, V2xMessage};
use crate::grid::{GridConfig, SCI_PRBS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub pdcp_header_bytes: usize,
    /// Compressed IP/UDP header size after ROHC.
    pub rohc_header_bytes: usize,
    pub non_ip_header_bytes: usize,
    pub rlc_um_header_bytes: usize,
    pub mac_header_bytes: usize,
    pub harq_processes: usize,
    pub max_lcids: usize,
    pub uu_capacity_bytes_per_tti: usize,
    pub uu_processing_ttis: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            pdcp_header_bytes: 2,
            rohc_header_bytes: 4,
            non_ip_header_bytes: 0,
            rlc_um_header_bytes: 1,
            mac_header_bytes: 2,
            harq_processes: 8,
            max_lcids: 32,
            uu_capacity_bytes_per_tti: 1000,
            uu_processing_ttis: 4,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.harq_processes == 0 {
            return Err(SimError::Config("stack.harq_processes must be >= 1".into()));
        }
        if self.max_lcids == 0 || self.max_lcids > 32 {
            return Err(SimError::Config(
                "stack.max_lcids must be within [1, 32]".into(),
            ));
        }
        if self.uu_capacity_bytes_per_tti == 0 {
            return Err(SimError::Config(
                "stack.uu_capacity_bytes_per_tti must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Bytes added below the application for a sidelink TB: PDCP, the
    /// pipeline header, RLC and MAC.
    pub fn sidelink_overhead(&self, pipeline: Pipeline) -> usize {
        self.pdcp_overhead(pipeline) + self.rlc_um_header_bytes + self.mac_header_bytes
    }

    pub fn pdcp_overhead(&self, pipeline: Pipeline) -> usize {
        self.pdcp_header_bytes
            + match pipeline {
                Pipeline::Ip => self.rohc_header_bytes,
                Pipeline::NonIp => self.non_ip_header_bytes,
            }
    }
}

/// Flow identity used to look up the logical channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub kind: MessageKind,
    pub ip: bool,
    pub unicast: Option<NodeId>,
}

impl FlowKey {
    pub fn of(msg: &V2xMessage) -> Self {
        FlowKey {
            kind: msg.kind,
            ip: msg.pipeline == Pipeline::Ip,
            unicast: match msg.destination {
                Destination::Unicast(n) => Some(n),
                Destination::Broadcast => None,
            },
        }
    }
}

/// Per-UE logical connections (IP and non-IP tables share the LCID space).
#[derive(Debug, Clone, Default)]
pub struct ConnectionTable {
    entries: BTreeMap<FlowKey, u8>,
    limit: usize,
}

impl ConnectionTable {
    pub fn new(limit: usize) -> Self {
        ConnectionTable {
            entries: BTreeMap::new(),
            limit,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, key: &FlowKey) -> Option<u8> {
        self.entries.get(key).copied()
    }

    /// Returns the flow's LCID, creating the entry on first use.
    pub fn resolve(&mut self, key: FlowKey, owner: NodeId) -> Result<u8> {
        if let Some(l) = self.lookup(&key) {
            return Ok(l);
        }
        if self.entries.len() >= self.limit {
            return Err(SimError::ConnectionRefused(format!(
                "{owner}: all {} LCIDs in use",
                self.limit
            )));
        }
        let lcid = self.entries.len() as u8;
        self.entries.insert(key, lcid);
        Ok(lcid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdcpPdu {
    pub msg: V2xMessage,
    pub lcid: u8,
    pub bytes: usize,
}

/// PDCP entry point: header compression or non-IP header, LCID lookup.
pub fn pdcp_ingress(
    msg: V2xMessage,
    owner: NodeId,
    table: &mut ConnectionTable,
    cfg: &StackConfig,
) -> Result<PdcpPdu> {
    if !msg.well_formed() || msg.payload_bytes == 0 {
        return Err(SimError::InvariantBreach(format!(
            "malformed message {}",
            msg.trace_id
        )));
    }
    let lcid = table.resolve(FlowKey::of(&msg), owner)?;
    let bytes = msg.payload_bytes + cfg.pdcp_overhead(msg.pipeline);
    Ok(PdcpPdu { msg, lcid, bytes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlcPdu {
    pub pdcp: PdcpPdu,
    pub sn: u32,
    pub bytes: usize,
}

impl RlcPdu {
    pub fn msg(&self) -> &V2xMessage {
        &self.pdcp.msg
    }
}

/// Transmit side of RLC UM: a sequence number per logical channel.
#[derive(Debug, Clone, Default)]
pub struct RlcUmTx {
    next_sn: BTreeMap<u8, u32>,
}

impl RlcUmTx {
    pub fn deliver(&mut self, pdu: PdcpPdu, cfg: &StackConfig) -> RlcPdu {
        let sn = self.next_sn.entry(pdu.lcid).or_insert(0);
        let out = RlcPdu {
            bytes: pdu.bytes + cfg.rlc_um_header_bytes,
            sn: *sn,
            pdcp: pdu,
        };
        *sn += 1;
        out
    }
}

/// Receive side of RLC UM: drops duplicates, never reorders.
#[derive(Debug, Clone, Default)]
pub struct RlcUmRx {
    recent: BTreeMap<(NodeId, u8), VecDeque<u32>>,
}

const RLC_RX_WINDOW: usize = 64;

impl RlcUmRx {
    /// True when the PDU is new and should be passed up.
    pub fn accept(&mut self, source: NodeId, lcid: u8, sn: u32) -> bool {
        let seen = self.recent.entry((source, lcid)).or_default();
        if seen.contains(&sn) {
            return false;
        }
        if seen.len() == RLC_RX_WINDOW {
            seen.pop_front();
        }
        seen.push_back(sn);
        true
    }
}

/// Payload capacity in bytes of a TB spanning `l_subch` subchannels, with
/// the SCI taking its two PRBs.
pub fn grant_capacity_bytes(l_subch: usize, grid: &GridConfig) -> usize {
    (l_subch * grid.subch_size).saturating_sub(SCI_PRBS) * grid.bytes_per_prb
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacPdu {
    pub rlc: RlcPdu,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarqEntry {
    pub peer: NodeId,
    pub trace_id: u64,
    pub bytes: usize,
}

/// Bounded HARQ process storage; the oldest process is recycled when all
/// are busy. Broadcast sidelink has no feedback, so entries are never
/// retransmitted.
#[derive(Debug, Clone)]
pub struct HarqBuffer {
    slots: VecDeque<HarqEntry>,
    capacity: usize,
}

impl HarqBuffer {
    pub fn new(capacity: usize) -> Self {
        HarqBuffer {
            slots: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Stores `e`, replacing any outstanding PDU for the same peer.
    pub fn store(&mut self, e: HarqEntry) {
        self.slots.retain(|s| s.peer != e.peer);
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Per-node MAC: SDU queues per logical channel plus HARQ buffers.
#[derive(Debug, Clone)]
pub struct MacBuffers {
    queues: BTreeMap<u8, VecDeque<RlcPdu>>,
    pub harq_tx: HarqBuffer,
    pub harq_rx: HarqBuffer,
    mac_header: usize,
}

impl MacBuffers {
    pub fn new(cfg: &StackConfig) -> Self {
        MacBuffers {
            queues: BTreeMap::new(),
            harq_tx: HarqBuffer::new(cfg.harq_processes),
            harq_rx: HarqBuffer::new(cfg.harq_processes),
            mac_header: cfg.mac_header_bytes,
        }
    }

    pub fn enqueue(&mut self, sdu: RlcPdu) {
        self.queues.entry(sdu.pdcp.lcid).or_default().push_back(sdu);
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queued(&self) -> impl Iterator<Item = &RlcPdu> {
        self.queues.values().flatten()
    }

    /// Removes every SDU whose deadline lies before `now`.
    pub fn purge_expired(&mut self, now: u64) -> Vec<RlcPdu> {
        let mut out = Vec::new();
        for q in self.queues.values_mut() {
            let (keep, gone): (VecDeque<_>, VecDeque<_>) =
                q.drain(..).partition(|s| s.msg().deadline >= now);
            *q = keep;
            out.extend(gone);
        }
        out.sort_by_key(|s| s.msg().trace_id);
        out
    }

    /// Removes the SDU with the given trace, if queued.
    pub fn remove(&mut self, trace_id: u64) -> Option<RlcPdu> {
        for q in self.queues.values_mut() {
            if let Some(i) = q.iter().position(|s| s.msg().trace_id == trace_id) {
                return q.remove(i);
            }
        }
        None
    }

    /// Highest-priority SDU whose MAC PDU fits in `capacity_bytes`: alerts
    /// first, then the oldest.
    fn best_fit(&self, capacity_bytes: usize) -> Option<(u8, usize)> {
        self.queues
            .iter()
            .flat_map(|(&lcid, q)| q.iter().enumerate().map(move |(i, s)| (lcid, i, s)))
            .filter(|(_, _, s)| s.bytes + self.mac_header <= capacity_bytes)
            .min_by_key(|(_, _, s)| {
                (
                    s.msg().kind != MessageKind::Alert,
                    s.msg().created_at,
                    s.msg().trace_id,
                )
            })
            .map(|(l, i, _)| (l, i))
    }

    /// One TTI with a grant of `capacity_bytes`: builds the MAC PDU for the
    /// best queued SDU and records it in the transmit HARQ buffer. Callers
    /// purge expired SDUs first.
    pub fn mac_tti(&mut self, capacity_bytes: usize) -> Option<MacPdu> {
        let (lcid, i) = self.best_fit(capacity_bytes)?;
        let rlc = self.queues.get_mut(&lcid)?.remove(i)?;
        let pdu = MacPdu {
            bytes: rlc.bytes + self.mac_header,
            rlc,
        };
        self.harq_tx.store(HarqEntry {
            peer: NodeId(u32::MAX),
            trace_id: pdu.rlc.msg().trace_id,
            bytes: pdu.bytes,
        });
        Some(pdu)
    }
}

/// One downlink transfer on the Uu interface.
#[derive(Debug, Clone, PartialEq)]
pub struct UuTransfer {
    pub ue: NodeId,
    pub msg: V2xMessage,
    pub remaining: usize,
    pub started: u64,
}

/// Round-robin Uu scheduler of one cell: each TTI serves one transfer
/// with the full per-TTI capacity.
#[derive(Debug, Clone)]
pub struct UuScheduler {
    pub capacity: usize,
    pub processing: u64,
    active: VecDeque<UuTransfer>,
}

impl UuScheduler {
    pub fn new(cfg: &StackConfig) -> Self {
        UuScheduler {
            capacity: cfg.uu_capacity_bytes_per_tti,
            processing: cfg.uu_processing_ttis,
            active: VecDeque::new(),
        }
    }

    pub fn submit(&mut self, ue: NodeId, msg: V2xMessage, pdu_bytes: usize, now: u64) {
        self.active.push_back(UuTransfer {
            ue,
            msg,
            remaining: pdu_bytes,
            started: now,
        });
    }

    pub fn in_flight(&self) -> usize {
        self.active.len()
    }

    /// Serves TTI `now`; returns the transfers that completed with their
    /// delivery tick.
    pub fn tti(&mut self, now: u64) -> Option<(UuTransfer, u64)> {
        let mut t = self.active.pop_front()?;
        t.remaining = t.remaining.saturating_sub(self.capacity);
        if t.remaining == 0 {
            Some((t, now + 1 + self.processing))
        } else {
            self.active.push_back(t);
            None
        }
    }

    /// Drops every transfer towards `ue`.
    pub fn abort_ue(&mut self, ue: NodeId) -> Vec<UuTransfer> {
        let (gone, keep): (VecDeque<_>, VecDeque<_>) =
            self.active.drain(..).partition(|t| t.ue == ue);
        self.active = keep;
        gone.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(id: u64, bytes: usize, created: u64) -> V2xMessage {
        V2xMessage {
            trace_id: id,
            kind: MessageKind::Cam,
            pipeline: Pipeline::NonIp,
            payload_bytes: bytes,
            created_at: created,
            source: NodeId(1),
            destination: Destination::Broadcast,
            deadline: created + 100,
        }
    }

    fn alert(id: u64, bytes: usize, created: u64) -> V2xMessage {
        V2xMessage {
            kind: MessageKind::Alert,
            pipeline: Pipeline::Ip,
            destination: Destination::Unicast(NodeId(1)),
            ..cam(id, bytes, created)
        }
    }

    #[test]
    fn pdcp_header_arithmetic() {
        let cfg = StackConfig::default();
        let mut t = ConnectionTable::new(32);
        let p = pdcp_ingress(cam(1, 300, 0), NodeId(1), &mut t, &cfg).unwrap();
        assert_eq!((p.bytes, p.lcid), (302, 0));
        assert_eq!(t.len(), 1);
        let p = pdcp_ingress(alert(2, 1000, 0), NodeId(1), &mut t, &cfg).unwrap();
        assert_eq!((p.bytes, p.lcid), (1006, 1));
        // same flow keeps its LCID
        let p = pdcp_ingress(cam(3, 280, 0), NodeId(1), &mut t, &cfg).unwrap();
        assert_eq!(p.lcid, 0);
    }

    #[test]
    fn lcid_space_is_bounded() {
        let mut t = ConnectionTable::new(32);
        for n in 0..32 {
            let key = FlowKey {
                kind: MessageKind::Alert,
                ip: true,
                unicast: Some(NodeId(n)),
            };
            t.resolve(key, NodeId(0)).unwrap();
        }
        let key = FlowKey {
            kind: MessageKind::Alert,
            ip: true,
            unicast: Some(NodeId(99)),
        };
        assert!(matches!(
            t.resolve(key, NodeId(0)),
            Err(SimError::ConnectionRefused(_))
        ));
    }

    #[test]
    fn rlc_um_sequence_and_duplicates() {
        let cfg = StackConfig::default();
        let mut t = ConnectionTable::new(32);
        let mut tx = RlcUmTx::default();
        let a = tx.deliver(
            pdcp_ingress(cam(1, 300, 0), NodeId(1), &mut t, &cfg).unwrap(),
            &cfg,
        );
        let b = tx.deliver(
            pdcp_ingress(cam(2, 300, 0), NodeId(1), &mut t, &cfg).unwrap(),
            &cfg,
        );
        assert_eq!((a.bytes, a.sn, b.sn), (303, 0, 1));
        let mut rx = RlcUmRx::default();
        assert!(rx.accept(NodeId(1), 0, 1));
        assert!(rx.accept(NodeId(1), 0, 0));
        assert!(!rx.accept(NodeId(1), 0, 1));
    }

    fn sdu(msg: V2xMessage, tx: &mut RlcUmTx, t: &mut ConnectionTable) -> RlcPdu {
        let cfg = StackConfig::default();
        tx.deliver(pdcp_ingress(msg, NodeId(1), t, &cfg).unwrap(), &cfg)
    }

    #[test]
    fn mac_priority_and_purge() {
        let cfg = StackConfig::default();
        let grid = GridConfig::default();
        let mut t = ConnectionTable::new(32);
        let mut tx = RlcUmTx::default();
        let mut mac = MacBuffers::new(&cfg);
        mac.enqueue(sdu(cam(1, 300, 0), &mut tx, &mut t));
        mac.enqueue(sdu(alert(2, 200, 5), &mut tx, &mut t));
        let pdu = mac.mac_tti(grant_capacity_bytes(1, &grid)).unwrap();
        assert_eq!(pdu.rlc.msg().trace_id, 2);
        assert_eq!(pdu.bytes, 200 + 2 + 4 + 1 + 2);
        assert_eq!(mac.harq_tx.len(), 1);
        // CAM deadline passes
        let gone = mac.purge_expired(101);
        assert_eq!(gone.len(), 1);
        assert!(mac.mac_tti(10_000).is_none());
    }

    #[test]
    fn oversize_sdu_waits_for_bigger_grant() {
        let cfg = StackConfig::default();
        let grid = GridConfig::default();
        let mut t = ConnectionTable::new(32);
        let mut tx = RlcUmTx::default();
        let mut mac = MacBuffers::new(&cfg);
        mac.enqueue(sdu(alert(1, 1200, 0), &mut tx, &mut t));
        assert!(mac.mac_tti(grant_capacity_bytes(1, &grid)).is_none());
        assert!(mac.mac_tti(grant_capacity_bytes(4, &grid)).is_some());
    }

    #[test]
    fn harq_is_bounded() {
        let mut h = HarqBuffer::new(8);
        for i in 0..20 {
            h.store(HarqEntry {
                peer: NodeId(i),
                trace_id: i as u64,
                bytes: 1,
            });
        }
        assert_eq!(h.len(), 8);
    }

    #[test]
    fn uu_single_ue_delay() {
        let cfg = StackConfig::default();
        let mut uu = UuScheduler::new(&cfg);
        uu.submit(NodeId(1), alert(1, 994, 0), 1000, 0);
        let (t, at) = uu.tti(0).unwrap();
        assert_eq!((t.ue, at), (NodeId(1), 5));
    }

    #[test]
    fn uu_round_robin_two_ues() {
        let cfg = StackConfig::default();
        let mut uu = UuScheduler::new(&cfg);
        uu.submit(NodeId(1), alert(1, 1494, 0), 1500, 0);
        uu.submit(NodeId(2), alert(2, 1494, 0), 1500, 0);
        let mut done = vec![];
        for now in 0..10 {
            if let Some((t, at)) = uu.tti(now) {
                done.push((t.ue, at));
            }
        }
        // single-UE time is 2 TTIs + 4
        assert_eq!(done, vec![(NodeId(1), 7), (NodeId(2), 8)]);
        assert!(done.iter().all(|&(_, at)| at <= 2 * 2 + 4));
    }

    #[test]
    fn uu_abort() {
        let cfg = StackConfig::default();
        let mut uu = UuScheduler::new(&cfg);
        uu.submit(NodeId(1), alert(1, 1494, 0), 3000, 0);
        uu.tti(0);
        assert_eq!(uu.abort_ue(NodeId(1)).len(), 1);
        assert_eq!(uu.in_flight(), 0);
    }
}
