#!/usr/bin/env python3
"""Generate a small labeled pcap tree for demos and smoke tests.

Creates <out>/<class_name>/*.pcap with a few TCP conversations per file;
class identity shows up in server ports and payload bytes. Everything is
seeded, so reruns produce identical files.
"""

import argparse
import struct
from pathlib import Path

import numpy as np

from netmamba.pcap import RawPacket, write_pcap

CLASSES = {"chat": 443, "video": 8080, "dns_like": 8053}


def ipv4_tcp(src: str, dst: str, sport: int, dport: int,
             payload: bytes) -> bytes:
    ip_src = bytes(int(x) for x in src.split("."))
    ip_dst = bytes(int(x) for x in dst.split("."))
    tcp = struct.pack(">HHIIBBHHH", sport, dport, 1000, 2000, 5 << 4,
                      0x18, 8192, 0, 0) + payload
    total = 20 + len(tcp)
    ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, 6, 0,
                     ip_src, ip_dst) + tcp
    eth = bytes(6) + bytes(range(6)) + struct.pack(">H", 0x0800)
    return eth + ip


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixtures/pcaps")
    parser.add_argument("--files-per-class", type=int, default=8)
    parser.add_argument("--flows-per-file", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    root = Path(args.out)
    for c, (name, dport) in enumerate(CLASSES.items()):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.files_per_class):
            packets = []
            for flow in range(args.flows_per_file):
                sport = 30000 + 100 * c + 10 * i + flow
                for k in range(int(rng.integers(2, 7))):
                    body = bytes(((rng.integers(0, 256, size=60) + 37 * c)
                                  % 256).astype(np.uint8))
                    frame = ipv4_tcp(f"10.0.{c}.{i + 1}", "203.0.113.9",
                                     sport, dport, body)
                    packets.append(RawPacket(ts_sec=i, ts_nsec=1000 * k + flow,
                                             link_bytes=frame,
                                             orig_len=len(frame)))
            write_pcap(class_dir / f"capture_{i:02d}.pcap", packets)
    total = len(CLASSES) * args.files_per_class
    print(f"wrote {total} pcap files under {root}")


if __name__ == "__main__":
    main()
