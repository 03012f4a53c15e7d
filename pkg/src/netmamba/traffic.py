"""Flow assembly and the byte-balanced, anonymized, stride-cut representation.

Pipeline per packet: strip the Ethernet (and VLAN) framing, drop non-IP and
optionally DHCP traffic, zero the IP address fields, split IP+transport
header from payload, crop/pad each part to a fixed budget. The first M
packets of a flow concatenate into one byte array that is cut into
non-overlapping strides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyFlowError, MalformedPacketError
from .pcap import RawPacket

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
VLAN_TPIDS = (0x8100, 0x88A8)
PROTO_TCP = 6
PROTO_UDP = 17
DHCP_PORTS = frozenset((67, 68, 546, 547))
# IPv6 extension headers counted as part of the packet header
_V6_EXT = frozenset((0, 43, 44, 60, 51))


@dataclass(frozen=True)
class FiveTuple:
    """Canonical conversation key: endpoint (ip_a, port_a) sorts <= (ip_b,
    port_b), so both directions map to the same tuple."""

    ip_a: bytes
    port_a: int
    ip_b: bytes
    port_b: int
    protocol: int

    @classmethod
    def canonical(cls, src_ip: bytes, src_port: int, dst_ip: bytes,
                  dst_port: int, protocol: int) -> "FiveTuple":
        if (src_ip, src_port) <= (dst_ip, dst_port):
            return cls(src_ip, src_port, dst_ip, dst_port, protocol)
        return cls(dst_ip, dst_port, src_ip, src_port, protocol)


@dataclass
class FlowRecord:
    key: FiveTuple
    packets: list[RawPacket]
    label: int | None = None


@dataclass(frozen=True)
class ReprConfig:
    packets_per_flow: int = 5     # M
    header_bytes: int = 80        # N_h
    payload_bytes: int = 240      # N_p
    stride_len: int = 4           # L_s
    anonymize_ips: bool = True
    include_header: bool = True
    include_payload: bool = True
    drop_dhcp: bool = True

    def __post_init__(self):
        if self.packets_per_flow < 1:
            raise ConfigError("packets_per_flow must be >= 1")
        if self.header_bytes < 0 or self.payload_bytes < 0:
            raise ConfigError("byte budgets must be non-negative")
        if self.header_bytes + self.payload_bytes < 1:
            raise ConfigError("need at least one byte per packet")
        if self.stride_len < 1:
            raise ConfigError("stride_len must be >= 1")
        if self.flow_bytes % self.stride_len:
            raise ConfigError(
                f"flow byte length {self.flow_bytes} is not divisible by "
                f"stride_len {self.stride_len}")

    @property
    def packet_bytes(self) -> int:
        return self.header_bytes + self.payload_bytes

    @property
    def flow_bytes(self) -> int:
        """L_b = M * (N_h + N_p)."""
        return self.packets_per_flow * self.packet_bytes

    @property
    def n_strides(self) -> int:
        """N_s = L_b / L_s."""
        return self.flow_bytes // self.stride_len


@dataclass
class StrideSample:
    """One flow cut into n_strides rows of stride_len bytes."""

    strides: np.ndarray           # (n_strides, stride_len) uint8
    flow_key: FiveTuple | None = None
    label: int | None = None

    @property
    def flat(self) -> np.ndarray:
        return self.strides.reshape(-1)


@dataclass
class AssemblyStats:
    kept_packets: int = 0
    skipped_packets: int = 0      # non-IP ethertypes and filtered DHCP
    malformed_packets: int = 0


def classify_and_strip(packet: RawPacket, cfg: ReprConfig) -> bytes | None:
    """Drop the Ethernet framing; return the IP datagram or None for
    non-IP / filtered traffic."""
    data = packet.link_bytes
    if len(data) < 14:
        raise MalformedPacketError(
            f"packet of {len(data)} bytes is shorter than an Ethernet header")
    off = 12
    ethertype = int.from_bytes(data[off:off + 2], "big")
    while ethertype in VLAN_TPIDS:
        off += 4
        if off + 2 > len(data):
            raise MalformedPacketError("truncated VLAN tag chain")
        ethertype = int.from_bytes(data[off:off + 2], "big")
    if ethertype not in (ETHERTYPE_IPV4, ETHERTYPE_IPV6):
        return None
    ip_bytes = data[off + 2:]
    if cfg.drop_dhcp:
        try:
            proto, t_off = _transport_offset(ip_bytes)
        except MalformedPacketError:
            return ip_bytes  # let downstream stages report it
        if proto == PROTO_UDP and t_off + 4 <= len(ip_bytes):
            sport = int.from_bytes(ip_bytes[t_off:t_off + 2], "big")
            dport = int.from_bytes(ip_bytes[t_off + 2:t_off + 4], "big")
            if sport in DHCP_PORTS or dport in DHCP_PORTS:
                return None
    return ip_bytes


def anonymize(ip_bytes: bytes, cfg: ReprConfig) -> bytes:
    """Zero the source and destination address fields (IPv4 offsets 12..19,
    IPv6 offsets 8..39); identity when anonymization is off."""
    if not cfg.anonymize_ips:
        return ip_bytes
    version = _ip_version(ip_bytes)
    if version == 4:
        if len(ip_bytes) < 20:
            raise MalformedPacketError("IPv4 packet shorter than 20 bytes")
        return ip_bytes[:12] + bytes(8) + ip_bytes[20:]
    if len(ip_bytes) < 40:
        raise MalformedPacketError("IPv6 packet shorter than 40 bytes")
    return ip_bytes[:8] + bytes(32) + ip_bytes[40:]


def _ip_version(ip_bytes: bytes) -> int:
    if not ip_bytes:
        raise MalformedPacketError("empty IP packet")
    version = ip_bytes[0] >> 4
    if version not in (4, 6):
        raise MalformedPacketError(f"IP version nibble is {version}, not 4 or 6")
    return version


def _transport_offset(ip_bytes: bytes) -> tuple[int, int]:
    """(protocol, offset of the transport header); IPv6 extension headers
    are walked and counted as header."""
    version = _ip_version(ip_bytes)
    if version == 4:
        if len(ip_bytes) < 20:
            raise MalformedPacketError("IPv4 packet shorter than 20 bytes")
        ihl = (ip_bytes[0] & 0x0F) * 4
        if ihl < 20:
            raise MalformedPacketError(f"IPv4 IHL of {ihl} bytes is invalid")
        if ihl > len(ip_bytes):
            raise MalformedPacketError(
                f"IPv4 header length {ihl} exceeds packet of {len(ip_bytes)}")
        return ip_bytes[9], ihl
    if len(ip_bytes) < 40:
        raise MalformedPacketError("IPv6 packet shorter than 40 bytes")
    proto = ip_bytes[6]
    off = 40
    while proto in _V6_EXT:
        if off + 2 > len(ip_bytes):
            raise MalformedPacketError(
                f"IPv6 extension chain exceeds packet at offset {off}")
        nxt = ip_bytes[off]
        if proto == 44:          # fragment header: fixed 8 bytes
            ext_len = 8
        elif proto == 51:        # AH counts in 4-byte units
            ext_len = (ip_bytes[off + 1] + 2) * 4
        else:
            ext_len = (ip_bytes[off + 1] + 1) * 8
        off += ext_len
        if off > len(ip_bytes):
            raise MalformedPacketError(
                f"IPv6 extension header length exceeds packet at offset {off}")
        proto = nxt
    return proto, off


def split_header_payload(ip_bytes: bytes) -> tuple[bytes, bytes]:
    """Header = IP header (+ extension headers) plus the TCP/UDP header when
    present; payload = the rest."""
    proto, off = _transport_offset(ip_bytes)
    if proto == PROTO_TCP:
        if off + 13 > len(ip_bytes):
            raise MalformedPacketError("TCP header truncated before data offset")
        doff = (ip_bytes[off + 12] >> 4) * 4
        if doff < 20:
            raise MalformedPacketError(f"TCP data offset of {doff} bytes is invalid")
        end = off + doff
    elif proto == PROTO_UDP:
        end = off + 8
    else:
        end = off
    if end > len(ip_bytes):
        raise MalformedPacketError(
            f"declared header length {end} exceeds packet of {len(ip_bytes)}")
    return ip_bytes[:end], ip_bytes[end:]


def crop_pad(header: bytes, payload: bytes, cfg: ReprConfig) -> np.ndarray:
    """Fixed byte budget per packet: header cropped/zero-padded to N_h, then
    payload to N_p. The include_* toggles blank a region entirely."""
    out = np.zeros(cfg.packet_bytes, dtype=np.uint8)
    if cfg.include_header and cfg.header_bytes:
        h = np.frombuffer(header[:cfg.header_bytes], dtype=np.uint8)
        out[:h.size] = h
    if cfg.include_payload and cfg.payload_bytes:
        p = np.frombuffer(payload[:cfg.payload_bytes], dtype=np.uint8)
        out[cfg.header_bytes:cfg.header_bytes + p.size] = p
    return out


def flow_key(ip_bytes: bytes) -> FiveTuple:
    version = _ip_version(ip_bytes)
    proto, off = _transport_offset(ip_bytes)
    if version == 4:
        src, dst = ip_bytes[12:16], ip_bytes[16:20]
    else:
        src, dst = ip_bytes[8:24], ip_bytes[24:40]
    sport = dport = 0
    if proto in (PROTO_TCP, PROTO_UDP) and off + 4 <= len(ip_bytes):
        sport = int.from_bytes(ip_bytes[off:off + 2], "big")
        dport = int.from_bytes(ip_bytes[off + 2:off + 4], "big")
    return FiveTuple.canonical(src, sport, dst, dport, proto)


def assemble_flows(packets, cfg: ReprConfig,
                   stats: AssemblyStats | None = None) -> list[FlowRecord]:
    """Group surviving packets by canonical 5-tuple, first-seen order;
    packets within a flow are time-ordered with a stable sort. Malformed
    packets are skipped and counted, never fatal."""
    if stats is None:
        stats = AssemblyStats()
    flows: dict[FiveTuple, FlowRecord] = {}
    for packet in packets:
        try:
            ip_bytes = classify_and_strip(packet, cfg)
            if ip_bytes is None:
                stats.skipped_packets += 1
                continue
            key = flow_key(ip_bytes)
        except MalformedPacketError:
            stats.malformed_packets += 1
            continue
        stats.kept_packets += 1
        record = flows.get(key)
        if record is None:
            flows[key] = FlowRecord(key=key, packets=[packet])
        else:
            record.packets.append(packet)
    out = list(flows.values())
    for record in out:
        record.packets.sort(key=lambda p: p.sort_key)
    return out


def build_sample(flow: FlowRecord, cfg: ReprConfig) -> StrideSample:
    """First M usable packets, cropped and concatenated, cut into strides.
    Flows shorter than M packets are padded with all-zero packet slots."""
    rows: list[np.ndarray] = []
    for packet in flow.packets:
        ip_bytes = classify_and_strip(packet, cfg)
        if ip_bytes is None:
            continue
        ip_bytes = anonymize(ip_bytes, cfg)
        header, payload = split_header_payload(ip_bytes)
        rows.append(crop_pad(header, payload, cfg))
        if len(rows) == cfg.packets_per_flow:
            break
    if not rows:
        raise EmptyFlowError(f"flow {flow.key} has no usable IP packet")
    flat = np.zeros(cfg.flow_bytes, dtype=np.uint8)
    flat[:len(rows) * cfg.packet_bytes] = np.concatenate(rows)
    return StrideSample(
        strides=flat.reshape(cfg.n_strides, cfg.stride_len),
        flow_key=flow.key,
        label=flow.label,
    )
