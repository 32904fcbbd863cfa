"""Builtin instances: a 16-coach high-speed train on a 5-station line and a desk-scale variant."""

from __future__ import annotations

from typing import Sequence

from .domain import Instance, Network, RequestType, Train
from .stochastic import DEFAULT_GROUP_SIZES, default_horizon

__all__ = [
    "STATIONS",
    "COACH_CAPACITIES",
    "OD_TABLE",
    "BUILTINS",
    "build_line_instance",
    "shinkansen",
    "shinkansen_mini",
    "toy_instance",
    "builtin",
]

STATIONS = ("Tokyo", "Shin-Yokohama", "Nagoya", "Kyoto", "Shin-Osaka")

# seats per coach, cars 1..16
COACH_CAPACITIES = (65, 100, 85, 100, 90, 100, 75, 68, 64, 68, 63, 100, 90, 100, 80, 75)

# (origin, destination) -> (fare in yen, average demand in requests)
OD_TABLE = {
    ("Tokyo", "Shin-Yokohama"): (3010, 87),
    ("Tokyo", "Nagoya"): (11300, 677),
    ("Tokyo", "Kyoto"): (14170, 390),
    ("Tokyo", "Shin-Osaka"): (14720, 846),
    ("Shin-Yokohama", "Nagoya"): (10640, 125),
    ("Shin-Yokohama", "Kyoto"): (13500, 110),
    ("Shin-Yokohama", "Shin-Osaka"): (14390, 175),
    ("Nagoya", "Kyoto"): (5910, 77),
    ("Nagoya", "Shin-Osaka"): (6680, 232),
    ("Kyoto", "Shin-Osaka"): (3080, 61),
}


def build_line_instance(
    coach_capacities: Sequence[int],
    total_mean: float | None = None,
    group_size_distribution: Sequence[float] = DEFAULT_GROUP_SIZES,
    stations: Sequence[str] = STATIONS,
    od_table: dict = OD_TABLE,
    name: str = "",
    horizon: int | None = None,
) -> Instance:
    """One request type per (origin-destination, group size).

    A group of ``n`` passengers on an OD pair pays ``n`` fares; its rate is the
    OD demand share times the group-size probability. ``total_mean`` defaults
    to the summed OD demand.
    """
    g = [float(x) for x in group_size_distribution]
    if abs(sum(g) - 1.0) > 1e-9:
        raise ValueError("group_size_distribution must sum to 1")
    demand_total = float(sum(d for _, d in od_table.values()))
    if total_mean is None:
        total_mean = demand_total
    net = Network(tuple(stations))
    types = []
    for (o, d), (fare, demand) in od_table.items():
        oi, di = net.station_index(o), net.station_index(d)
        for n, gn in enumerate(g, start=1):
            if gn <= 0:
                continue
            types.append(RequestType(oi, di, n, n * fare, demand * gn / demand_total))
    arrival_model = {
        "total_mean": float(total_mean),
        "horizon": horizon or default_horizon(total_mean),
        "distribution": "poisson",
        "group_size_distribution": g,
        "od": [
            {"origin": o, "destination": d, "price": fare, "demand": demand}
            for (o, d), (fare, demand) in od_table.items()
        ],
    }
    return Instance(net, Train(tuple(coach_capacities)), types, None, arrival_model, name)


def shinkansen() -> Instance:
    return build_line_instance(COACH_CAPACITIES, name="shinkansen")


def shinkansen_mini() -> Instance:
    return build_line_instance((25, 25, 25, 25), total_mean=350.0, name="shinkansen-mini")


def toy_instance() -> Instance:
    """One coach of 2 seats on 3 stations: a 2-group on both legs, singles on each leg."""
    types = [
        RequestType(1, 3, 2, 10, 1 / 3),
        RequestType(1, 2, 1, 4, 1 / 3),
        RequestType(2, 3, 1, 4, 1 / 3),
    ]
    return Instance(Network(("A", "B", "C")), Train((2,)), types, [0, 1, 2],
                    {"total_mean": 3.0, "horizon": 3}, "toy")


BUILTINS = {
    "shinkansen": shinkansen,
    "shinkansen-mini": shinkansen_mini,
    "toy": toy_instance,
}


def builtin(name: str) -> Instance:
    if name not in BUILTINS:
        raise ValueError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}")
    return BUILTINS[name]()
