"""JSON readers and writers for networks, measurements, states and PMU sets.

Every file is per unit and radians.  Parse failures raise :class:`InputError`
naming the file position or the offending record.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError
from .power_model import (
    CURRENT,
    VOLTAGE,
    Branch,
    Bus,
    BusBranchModel,
    Channel,
    PmuConfig,
    PolarPhasor,
)


def _load(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def _field(rec, key, where, default=None, required=True):
    if key in rec:
        try:
            return float(rec[key])
        except (TypeError, ValueError):
            raise InputError(f"{where}: field {key!r} is not a number: {rec[key]!r}") from None
    if required and default is None:
        raise InputError(f"{where}: missing field {key!r}")
    return default


# ---- network ---------------------------------------------------------------


def network_from_dict(data, source="network"):
    if not isinstance(data, dict) or "buses" not in data or "branches" not in data:
        raise InputError(f"{source}: expected an object with 'buses' and 'branches'")
    buses = []
    for k, rec in enumerate(data["buses"]):
        where = f"{source}: buses[{k}]"
        if "id" not in rec:
            raise InputError(f"{where}: missing field 'id'")
        buses.append(Bus(int(rec["id"]), _field(rec, "base_kv", where, 0.0, required=False)))
    branches = []
    for k, rec in enumerate(data["branches"]):
        where = f"{source}: branches[{k}]"
        try:
            a, b = int(rec["from"]), int(rec["to"])
        except (KeyError, TypeError, ValueError):
            raise InputError(f"{where}: 'from' and 'to' must be bus ids") from None
        extra = dict(
            g_s=_field(rec, "g_s", where, 0.0, required=False),
            b_s=_field(rec, "b_s", where, 0.0, required=False),
            tau=_field(rec, "tau", where, 1.0, required=False),
            phi=_field(rec, "phi", where, 0.0, required=False),
        )
        try:
            if "g" in rec or "b" in rec:
                branches.append(Branch(a, b, _field(rec, "g", where), _field(rec, "b", where), **extra))
            elif "r" in rec or "x" in rec:
                r, x = _field(rec, "r", where, 0.0, False), _field(rec, "x", where, 0.0, False)
                if r == 0 and x == 0:
                    raise InputError(f"{where}: zero series impedance")
                branches.append(Branch.from_impedance(a, b, r, x, **extra))
            else:
                raise InputError(f"{where}: needs either g/b or r/x")
        except InputError as exc:
            if str(exc).startswith(source):
                raise
            raise InputError(f"{where}: {exc}") from None
    return BusBranchModel(buses, branches)


def network_to_dict(model):
    return {
        "buses": [{"id": b.id, "base_kv": b.base_kv} for b in model.buses],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "g": br.g, "b": br.b, "g_s": br.g_s,
             "b_s": br.b_s, "tau": br.tau, "phi": br.phi}
            for br in model.branches
        ],
    }


def load_network(path):
    return network_from_dict(_load(path), str(path))


def save_network(model, path):
    _dump(network_to_dict(model), path)


# ---- measurements ------------------------------------------------------------


def _channel_from(rec, where):
    kind = rec.get("kind")
    if kind == VOLTAGE:
        if "bus" not in rec:
            raise InputError(f"{where}: voltage measurement needs 'bus'")
        return Channel.voltage(int(rec["bus"]))
    if kind == CURRENT:
        if "branch" not in rec or "direction" not in rec:
            raise InputError(f"{where}: current measurement needs 'branch' and 'direction'")
        try:
            return Channel.current(int(rec["branch"]), rec["direction"])
        except InputError as exc:
            raise InputError(f"{where}: {exc}") from None
    raise InputError(f"{where}: unknown kind {kind!r}")


def _channel_to(ch):
    if ch.kind == VOLTAGE:
        return {"kind": VOLTAGE, "bus": ch.bus}
    return {"kind": CURRENT, "branch": ch.branch, "direction": ch.direction}


def measurements_from_list(data, source="measurements"):
    if not isinstance(data, list):
        raise InputError(f"{source}: expected a JSON array")
    out = []
    for k, rec in enumerate(data):
        where = f"{source}: [{k}]"
        if not isinstance(rec, dict):
            raise InputError(f"{where}: expected an object")
        ch = _channel_from(rec, where)
        vals = [_field(rec, key, where) for key in ("z_m", "z_theta", "var_m", "var_theta")]
        try:
            out.append(PolarPhasor(ch, *vals))
        except InputError as exc:
            raise InputError(f"{where}: {exc}") from None
    return out


def measurements_to_list(phasors):
    return [
        {**_channel_to(p.channel), "z_m": p.z_m, "z_theta": p.z_theta, "var_m": p.var_m,
         "var_theta": p.var_theta}
        for p in phasors
    ]


def load_measurements(path):
    return measurements_from_list(_load(path), str(path))


def save_measurements(phasors, path):
    _dump(measurements_to_list(phasors), path)


# ---- state -------------------------------------------------------------------


def state_from_list(data, source="state"):
    try:
        arr = np.array(data, dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{source}: expected an array of [V_re, V_im] pairs") from None
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"{source}: expected an array of [V_re, V_im] pairs")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{source}: non-finite entries")
    return arr


def load_state(path):
    return state_from_list(_load(path), str(path))


def save_state(state, path):
    _dump([[float(a), float(b)] for a, b in np.asarray(state)], path)


# ---- PMU placement -------------------------------------------------------------


def pmu_from_dict(data, source="pmu"):
    """``{"<bus>": null | [channel, ...]}`` with channels as in measurement files."""
    if not isinstance(data, dict):
        raise InputError(f"{source}: expected an object keyed by bus id")
    pmu = PmuConfig()
    for key, chans in data.items():
        where = f"{source}: bus {key}"
        try:
            bus = int(key)
        except ValueError:
            raise InputError(f"{where}: key is not a bus id") from None
        if chans is None:
            pmu.add(bus)
        else:
            pmu.add(bus, [_channel_from(c, where) for c in chans])
    return pmu


def pmu_to_dict(pmu):
    return {
        str(bus): None if chans is None else [_channel_to(c) for c in chans]
        for bus, chans in sorted(pmu.channels.items())
    }


def load_pmu(path):
    return pmu_from_dict(_load(path), str(path))


def save_pmu(pmu, path):
    _dump(pmu_to_dict(pmu), path)


def save_json(obj, path):
    _dump(obj, path)


load_json = _load
