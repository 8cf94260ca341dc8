"""Glue from a parsed configuration to designs, certificates and runs."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .certification import certify
from .errors import DelayStabError
from .simulation import Scenario
from .spectral import build_plant_model
from .synthesis import design_controller

COARSE_POINTS_PER_DECADE = 4


def build_model(cfg):
    return build_plant_model(cfg.plant, margin=cfg.margin, m_modes=cfg.m_modes, grid_size=cfg.grid_size)


def build_design(cfg, model=None, params=None):
    model = model or build_model(cfg)
    return design_controller(model, params or cfg.design, gains=cfg.gains,
                             ctrl_poles=cfg.ctrl_poles, obs_poles=cfg.obs_poles)


def search_config(cfg, seed_grid=None, n_max=None):
    search = cfg.certification
    if seed_grid is not None and seed_grid.upper() == "COARSE":
        search = replace(search, points_per_decade=COARSE_POINTS_PER_DECADE)
    if n_max is not None:
        search = replace(search, n_max=int(n_max))
    return search


def scenario_for(cfg, design, certificate=None):
    sim = cfg.simulation
    return Scenario(
        design=design, z0=sim.z0, y0=sim.y0, T=sim.T, dt=sim.dt, plant_kind=sim.plant_kind,
        certificate=certificate if certificate is not None and certificate.certified else None,
        n=certificate.n if certificate is not None and certificate.certified else None,
        m_modes=sim.m_modes, fd_grid=sim.fd_grid, record_stride=cfg.output.record_stride,
        artstein_stride=sim.artstein_stride, lipschitz_bound=sim.lipschitz_bound,
        keep_profiles=cfg.output.profiles,
    )


def _sweep_point(args):
    model, cfg, search, value = args
    from .config import with_parameter

    try:
        params = with_parameter(cfg.design, cfg.sweep.parameter, value)
        design = build_design(cfg, model, params)
        report = certify(design, search)
    except (DelayStabError, ValueError) as exc:
        return {"value": value, "status": "error", "n": None, "note": str(exc)}
    return {"value": value, "status": report.status, "n": report.n if report.certified else None,
            "note": ""}


def sweep_threads():
    raw = os.environ.get("DELAY_STAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_sweep(cfg, search=None, threads=None):
    """Smallest certified order for each value of the swept parameter.

    Points run in worker processes (``DELAY_STAB_THREADS`` of them); rows
    come back in the order of ``cfg.sweep.values`` whatever the scheduling.
    """
    search = search or cfg.certification
    model = build_model(cfg)
    # compiled expressions are closures; the sweep needs none of them
    light = replace(cfg, simulation=None)
    jobs = [(model, light, search, v) for v in cfg.sweep.values]
    threads = sweep_threads() if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [_sweep_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_sweep_point, jobs))
