"""Origin-destination demand: TNTP trip tables, gravity synthesis, traveler types."""

from __future__ import annotations

import io
import math
import re
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .network import Network, TNTPFormatError, _read_text, _split_metadata, all_pairs_costs


@dataclass(frozen=True)
class ODMatrix:
    """OD trip table with strictly positive entries ``(origin, destination, trips)``."""

    entries: tuple = ()

    def __post_init__(self):
        clean = []
        for o, d, q in self.entries:
            q = float(q)
            if o == d:
                raise ValueError(f"OD entry with origin == destination ({o})")
            if not q >= 0 or math.isinf(q):
                raise ValueError(f"invalid trips {q!r} for OD pair {o} -> {d}")
            if q > 0:
                clean.append((o, d, q))
        object.__setattr__(self, "entries", tuple(clean))

    @property
    def total(self) -> float:
        return math.fsum(q for _, _, q in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def as_dict(self) -> dict:
        return {(o, d): q for o, d, q in self.entries}

    def row_sums(self) -> dict:
        sums = defaultdict(float)
        for o, _, q in self.entries:
            sums[o] += q
        return dict(sums)


@dataclass(frozen=True)
class TravelerType:
    """One OD pair with unit demand vector ``b`` (-1 at origin, +1 at destination)."""

    id: int
    origin: object
    destination: object
    volume: float

    def demand_vector(self, net: Network) -> np.ndarray:
        b = np.zeros(net.num_nodes)
        b[net.index_of(self.origin)] = -1.0
        b[net.index_of(self.destination)] = 1.0
        return b


def parse_tntp_trips(text: str | TextIO) -> ODMatrix:
    """Parse a TNTP ``*_trips.tntp`` file.

    Zero entries and intra-zonal trips are dropped. When ``<TOTAL OD FLOW>`` is
    present the parsed total must match it to 1e-6 relative.
    """
    lines = _read_text(text).splitlines()
    meta, start = _split_metadata(lines)
    entries = []
    origin = None
    grand_total = 0.0
    dropped_intra = 0.0
    pair = re.compile(r"^\s*(\S+)\s*:\s*(\S+?)\s*$")
    for i in range(start, len(lines)):
        line = lines[i].split("~", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) != 2:
                raise TNTPFormatError(f"malformed Origin line {line!r}", i + 1)
            try:
                origin = int(parts[1])
            except ValueError:
                raise TNTPFormatError(f"non-integer origin {parts[1]!r}", i + 1) from None
            continue
        if origin is None:
            raise TNTPFormatError("OD entries before any Origin block", i + 1)
        for chunk in line.split(";"):
            if not chunk.strip():
                continue
            match = pair.match(chunk)
            if match is None:
                raise TNTPFormatError(f"malformed entry {chunk.strip()!r} in Origin {origin}", i + 1)
            try:
                dest, q = int(match.group(1)), float(match.group(2))
            except ValueError:
                raise TNTPFormatError(f"bad OD entry {chunk.strip()!r}", i + 1) from None
            if q < 0:
                raise TNTPFormatError(f"negative demand {q} for {origin} -> {dest}", i + 1)
            grand_total += q
            if dest == origin:
                dropped_intra += q
            elif q > 0:
                entries.append((origin, dest, q))

    if "TOTAL OD FLOW" in meta:
        try:
            declared = float(meta["TOTAL OD FLOW"])
        except ValueError:
            raise TNTPFormatError("<TOTAL OD FLOW> is not a number") from None
        if abs(grand_total - declared) > 1e-6 * max(abs(declared), 1.0):
            raise TNTPFormatError(
                f"parsed total {grand_total} differs from <TOTAL OD FLOW> {declared}")
    if dropped_intra > 0:
        warnings.warn(f"dropped {dropped_intra} intra-zonal trips", stacklevel=2)
    return ODMatrix(tuple(entries))


def write_tntp_trips(od: ODMatrix, zones: Sequence | None = None, out: TextIO | None = None) -> str:
    by_origin = defaultdict(list)
    for o, d, q in od.entries:
        by_origin[o].append((d, q))
    origins = sorted(by_origin) if zones is None else list(zones)
    buf = io.StringIO()
    n_zones = len(zones) if zones is not None else len(set(by_origin) | {d for _, d, _ in od.entries})
    buf.write(f"<NUMBER OF ZONES> {n_zones}\n")
    buf.write(f"<TOTAL OD FLOW> {od.total!r}\n")
    buf.write("<END OF METADATA>\n\n\n")
    for o in origins:
        buf.write(f"Origin \t{o}\n")
        row = sorted(by_origin.get(o, []))
        for k in range(0, len(row), 5):
            buf.write("".join(f"{d:5d} : {q!r};\t" for d, q in row[k:k + 5]).rstrip() + "\n")
        buf.write("\n")
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def gravity_demand(net: Network, q: float) -> ODMatrix:
    """Each node emits ``q`` trips, split over all other nodes ``d`` in
    proportion to ``exp(t_od)`` where ``t_od`` is the free-flow shortest time.
    """
    if not q > 0:
        raise ValueError(f"trips per origin must be positive, got {q!r}")
    times = all_pairs_costs(net, net.free_flow_time)
    ids = net.node_ids
    entries = []
    for o in range(net.num_nodes):
        dests = [d for d in range(net.num_nodes) if d != o]
        row = times[o, dests]
        bad = np.flatnonzero(~np.isfinite(row))
        if bad.size:
            raise ValueError(f"no path from {ids[o]} to {ids[dests[bad[0]]]}; "
                             "gravity demand needs a connected network")
        # shift by the max before exponentiating; the ratios are unchanged
        weights = np.exp(row - row.max())
        shares = q * weights / weights.sum()
        entries += [(ids[o], ids[d], float(s)) for d, s in zip(dests, shares)]
    return ODMatrix(tuple(entries))


def scale_demand(od: ODMatrix, factor: float) -> ODMatrix:
    if not factor > 0 or math.isinf(factor):
        raise ValueError(f"demand scale factor must be positive, got {factor!r}")
    return ODMatrix(tuple((o, d, q * factor) for o, d, q in od.entries))


def to_traveler_types(od: ODMatrix) -> list[TravelerType]:
    """One traveler type per OD entry, ordered by origin then destination."""
    ordered = sorted(od.entries, key=lambda e: (e[0], e[1]))
    return [TravelerType(w, o, d, q) for w, (o, d, q) in enumerate(ordered)]
