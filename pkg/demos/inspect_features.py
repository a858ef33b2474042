"""Print the per-connection statistics extracted from a short hand-written packet exchange."""

from __future__ import annotations

from bcids.traffic import FEATURE_NAMES, PacketRecord, Protocol, extract_trace


def tcp(t, src, dst, sport, dport, *flags, length=60):
    return PacketRecord(t, src, dst, sport, dport, Protocol.TCP, length, frozenset(flags))


client, peer, scanner = "10.0.0.1", "10.0.0.2", "10.0.9.9"
packets = [
    tcp(0.00, client, peer, 41000, 30303, "SYN"),
    tcp(0.05, peer, client, 30303, 41000, "SYN", "ACK"),
    tcp(0.10, client, peer, 41000, 30303, "ACK", length=420),
    tcp(0.20, client, peer, 41000, 30303, "FIN", "ACK"),
    tcp(0.30, scanner, peer, 50001, 22, "SYN"),
    tcp(0.35, peer, scanner, 22, 50001, "RST", "ACK"),
    tcp(0.40, scanner, peer, 50002, 8545, "SYN"),
]

for vec in extract_trace(packets):
    print(f"{vec.source.src_ip}:{vec.source.src_port} -> {vec.source.dst_ip}:{vec.source.dst_port}")
    for name, value in zip(FEATURE_NAMES, vec.values):
        print(f"    {name:<28} {value}")
