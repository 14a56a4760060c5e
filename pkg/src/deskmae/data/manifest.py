"""Catalog/manifest records and the diversity-stratified manifest sampler.

Manifest and catalog files are JSONL, one :class:`ManifestEntry` per line with
these fields::

    location_id, lat, lon, sensor, gsd, date (YYYY-MM-DD), season, year,
    population, land_cover, climate_zone, biome, path

``path`` identifies an entry; a manifest never repeats one.
"""
from __future__ import annotations

import datetime as dt
import json
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

SENSORS = ("GeoEye-1", "WorldView-2", "WorldView-3", "other")
SEASONS = ("winter", "spring", "summer", "fall")
_NORTH = {12: "winter", 1: "winter", 2: "winter", 3: "spring", 4: "spring", 5: "spring",
          6: "summer", 7: "summer", 8: "summer", 9: "fall", 10: "fall", 11: "fall"}
_FLIP = {"winter": "summer", "summer": "winter", "spring": "fall", "fall": "spring"}


def derive_season(date, lat: float) -> str:
    """Meteorological season (DJF/MAM/JJA/SON); southern latitudes shift by two quarters."""
    if isinstance(date, str):
        date = dt.date.fromisoformat(date)
    season = _NORTH[date.month]
    return season if lat >= 0 else _FLIP[season]


class QuotaError(ValueError):
    def __init__(self, constraint: str):
        self.constraint = constraint
        super().__init__(f"infeasible quota: {constraint}")


@dataclass(frozen=True)
class ManifestEntry:
    location_id: str
    lat: float
    lon: float
    sensor: str
    gsd: float
    date: str
    season: str
    year: int
    population: float
    land_cover: str
    climate_zone: str
    biome: str
    path: str

    def __post_init__(self):
        if self.sensor not in SENSORS:
            raise ValueError(f"{self.path}: unknown sensor {self.sensor!r}")
        if self.gsd <= 0:
            raise ValueError(f"{self.path}: gsd must be > 0")
        if self.population < 0:
            raise ValueError(f"{self.path}: population must be >= 0")
        d = dt.date.fromisoformat(self.date)
        if self.year != d.year:
            raise ValueError(f"{self.path}: year {self.year} disagrees with date {self.date}")
        if self.season != derive_season(d, self.lat):
            raise ValueError(f"{self.path}: season {self.season!r} inconsistent with {self.date} at lat {self.lat}")

    @property
    def stratum(self) -> tuple[str, str]:
        return self.land_cover, self.climate_zone

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown manifest fields: {sorted(unknown)}")
        d = dict(d)
        if "season" not in d:
            d["season"] = derive_season(d["date"], d["lat"])
        if "year" not in d:
            d["year"] = dt.date.fromisoformat(d["date"]).year
        return cls(**d)


def read_jsonl(path) -> list[ManifestEntry]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(ManifestEntry.from_dict(json.loads(line)))
            except (ValueError, TypeError) as e:
                raise ValueError(f"{path}:{n}: {e}") from e
    return out


def write_jsonl(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict()) + "\n")


@dataclass(frozen=True)
class SamplerQuotas:
    target_locations: int | None = None  # None: as many as the other quotas allow
    max_views_per_location: int = 4
    distinct_seasons: bool = True
    population_nonzero_fraction: float = 0.60
    population_tolerance: float = 0.05
    min_stratum_coverage: int = 1

    def __post_init__(self):
        if not 0 <= self.population_nonzero_fraction <= 1 or not 0 <= self.population_tolerance <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.max_views_per_location < 1:
            raise ValueError("max_views_per_location must be >= 1")
        if self.target_locations is not None and self.target_locations < 1:
            raise ValueError("target_locations must be >= 1")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _nonzero_count(total: int, nz_avail: int, z_avail: int, q: SamplerQuotas,
                   exact: bool = False) -> int | None:
    """Feasible nonzero-population count closest to the target fraction, or None.

    ``exact`` demands the rounded target itself rather than anything in the band.
    """
    lo, hi = max(0, total - z_avail), min(total, nz_avail)
    if lo > hi:
        return None
    want = _round_half_up(q.population_nonzero_fraction * total)
    c = min(max(want, lo), hi)
    if exact and c != want:
        return None
    if abs(c / total - q.population_nonzero_fraction) > q.population_tolerance + 1e-12:
        return None
    return c


def _pick_views(entries, q: SamplerQuotas, rng) -> list[ManifestEntry]:
    order = rng.permutation(len(entries))
    chosen, seasons = [], set()
    for i in order:
        e = entries[i]
        if q.distinct_seasons and e.season in seasons:
            continue
        chosen.append(e)
        seasons.add(e.season)
        if len(chosen) == q.max_views_per_location:
            break
    return sorted(chosen, key=lambda e: (e.date, e.path))


def sample_manifest(catalog, quotas: SamplerQuotas = SamplerQuotas(), seed: int = 0,
                    best_effort: bool = False):
    """Select locations and per-location views satisfying ``quotas``.

    Strata (land cover x climate zone) are visited round-robin in a seeded
    order, first to reach the minimum coverage, then to fill the location
    budget while steering towards the population target; a repair pass swaps
    locations between population classes if coverage picks overshot it.
    Returns ``(entries, diagnostics)``.
    """
    catalog = list(catalog)
    if not catalog:
        raise ValueError("catalog is empty")
    paths = Counter(e.path for e in catalog)
    dupes = [p for p, n in paths.items() if n > 1]
    if dupes:
        raise ValueError(f"catalog repeats entries: {dupes[:3]}")
    rng = np.random.default_rng(seed)
    violations: list[str] = []

    by_loc: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in sorted(catalog, key=lambda e: (e.location_id, e.date, e.path)):
        by_loc[e.location_id].append(e)
    locs = sorted(by_loc)
    views = {loc: _pick_views(by_loc[loc], quotas, rng) for loc in locs}
    nonzero = {loc: by_loc[loc][0].population > 0 for loc in locs}
    stratum = {loc: by_loc[loc][0].stratum for loc in locs}

    nz_avail = sum(nonzero.values())
    z_avail = len(locs) - nz_avail
    if quotas.target_locations is not None:
        total = min(quotas.target_locations, len(locs))
        if total < quotas.target_locations:
            violations.append(f"location budget: asked {quotas.target_locations}, catalog has {len(locs)} locations")
        want_nz = _nonzero_count(total, nz_avail, z_avail, quotas)
    else:
        # largest budget hitting the rounded target, else the largest inside the band
        want_nz = None
        for exact in (True, False):
            total = len(locs)
            while total > 0:
                want_nz = _nonzero_count(total, nz_avail, z_avail, quotas, exact)
                if want_nz is not None:
                    break
                total -= 1
            if want_nz is not None:
                break
    if want_nz is None:
        violations.append(
            f"population fraction: cannot reach {quotas.population_nonzero_fraction:.2f}"
            f"+/-{quotas.population_tolerance:.2f} with {nz_avail} non-zero / {z_avail} zero-population locations")
        total = total or len(locs)
        want_nz = min(nz_avail, _round_half_up(quotas.population_nonzero_fraction * total))
        want_nz = max(want_nz, total - z_avail)

    strata = sorted(set(stratum.values()))
    pools = {s: {True: [], False: []} for s in strata}
    for loc in locs:
        pools[stratum[loc]][nonzero[loc]].append(loc)
    for s in strata:
        for k in (True, False):
            pools[s][k] = [pools[s][k][i] for i in rng.permutation(len(pools[s][k]))]
    visit = [strata[i] for i in rng.permutation(len(strata))]
    required = {s: min(quotas.min_stratum_coverage, len(pools[s][True]) + len(pools[s][False])) for s in strata}
    for s in strata:
        if required[s] < quotas.min_stratum_coverage:
            violations.append(f"stratum coverage: {s} has only {required[s]} locations")
    if sum(required.values()) > total:
        violations.append(f"stratum coverage: {len(strata)} strata need {sum(required.values())} locations, budget is {total}")

    need = {True: want_nz, False: total - want_nz}
    chosen: list[str] = []
    count = Counter()

    def take(s, cls):
        loc = pools[s][cls].pop(0)
        chosen.append(loc)
        count[s] += 1
        need[cls] -= 1

    def preferred(s):
        # class with the larger remaining share of its quota, if this stratum still has one
        ranked = sorted((True, False), key=lambda c: -need[c] / max(1, want_nz if c else total - want_nz))
        for c in ranked:
            if pools[s][c] and need[c] > 0:
                return c
        return None

    for s in visit:  # coverage pass
        while count[s] < required[s] and len(chosen) < total:
            c = preferred(s)
            if c is None:
                c = True if pools[s][True] else False
            take(s, c)
    progress = True
    while len(chosen) < total and progress:  # fill pass
        progress = False
        for s in visit:
            if len(chosen) >= total:
                break
            c = preferred(s)
            if c is not None:
                take(s, c)
                progress = True

    # repair: coverage picks may have overdrawn one population class
    for over in (True, False):
        under = not over
        while need[over] < 0 and need[under] > 0:
            swapped = False
            for s in visit:
                if not pools[s][under]:
                    continue
                cands = [loc for loc in chosen if nonzero[loc] == over and
                         (stratum[loc] == s or count[stratum[loc]] > required[stratum[loc]])]
                if not cands:
                    continue
                out = cands[-1]
                chosen.remove(out)
                count[stratum[out]] -= 1
                pools[stratum[out]][over].append(out)
                need[over] += 1
                take(s, under)
                swapped = True
                break
            if not swapped:
                violations.append("population fraction: repair pass could not rebalance within stratum coverage")
                break

    chosen_set = set(chosen)
    manifest = [e for loc in locs if loc in chosen_set for e in views[loc]]
    diag = diagnostics(manifest, catalog, quotas)
    diag["requested_locations"] = total
    diag["violations"] = violations
    if violations:
        if not best_effort:
            raise QuotaError(violations[0])
        for v in violations:
            warnings.warn(f"sample_manifest: {v}", stacklevel=2)
    return manifest, diag


def diagnostics(manifest, catalog, quotas: SamplerQuotas) -> dict:
    locs: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in manifest:
        locs[e.location_id].append(e)
    n_loc = len(locs)
    nz = sum(1 for es in locs.values() if es[0].population > 0)
    cover = Counter(es[0].stratum for es in locs.values())
    available = sorted({e.stratum for e in catalog})
    return {
        "locations": n_loc,
        "views": len(manifest),
        "nonzero_population_fraction": nz / n_loc if n_loc else 0.0,
        "target_population_fraction": quotas.population_nonzero_fraction,
        "max_views_observed": max((len(v) for v in locs.values()), default=0),
        "duplicate_season_locations": sum(1 for v in locs.values() if len({e.season for e in v}) < len(v)),
        "strata_available": len(available),
        "strata_covered": len(cover),
        "min_stratum_count": min((cover.get(s, 0) for s in available), default=0),
        "seasons": dict(Counter(e.season for e in manifest)),
        "sensors": dict(Counter(e.sensor for e in manifest)),
        "years": {str(k): v for k, v in sorted(Counter(e.year for e in manifest).items())},
        "gsd_range": [min((e.gsd for e in manifest), default=0.0), max((e.gsd for e in manifest), default=0.0)],
    }


# -- synthetic catalogs ----------------------------------------------------
_REGIONS = {  # lat/lon boxes
    "taiwan": ((22.0, 25.3), (120.0, 122.0)),
    "india": ((8.0, 32.0), (70.0, 88.0)),
    "ukraine": ((45.0, 52.0), (23.0, 40.0)),
    "south": ((-38.0, -10.0), (115.0, 150.0)),
}
LAND_COVER = ("urban", "cropland", "forest", "grassland")
CLIMATE = ("tropical", "arid", "temperate")
BIOMES = ("moist-forest", "dry-forest", "grassland-savanna", "temperate-broadleaf")


def gen_catalog(n_entries: int = 200, seed: int = 0, nonzero_share: float = 0.5) -> list[ManifestEntry]:
    """Synthetic catalog with uneven views per location and some same-season repeats."""
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    loc = 0
    regions = list(_REGIONS)
    while len(entries) < n_entries:
        region = regions[loc % len(regions)]
        (la0, la1), (lo0, lo1) = _REGIONS[region]
        lat, lon = float(rng.uniform(la0, la1)), float(rng.uniform(lo0, lo1))
        # golden-ratio sequence spreads the populated locations evenly over strata
        populated = (loc * 0.6180339887498949) % 1.0 < nonzero_share
        pop = float(rng.integers(1, 5000)) if populated else 0.0
        lc = LAND_COVER[loc % len(LAND_COVER)]
        cz = CLIMATE[(loc // len(LAND_COVER)) % len(CLIMATE)]
        biome = BIOMES[int(rng.integers(len(BIOMES)))]
        k = int(rng.integers(1, 7))
        for v in range(min(k, n_entries - len(entries))):
            day = dt.date(int(rng.integers(2015, 2024)), int(rng.integers(1, 13)), int(rng.integers(1, 29)))
            entries.append(ManifestEntry(
                location_id=f"{region}-{loc:04d}", lat=round(lat, 5), lon=round(lon, 5),
                sensor=SENSORS[int(rng.integers(3))], gsd=round(float(rng.uniform(0.3, 0.8)), 3),
                date=day.isoformat(), season=derive_season(day, lat), year=day.year,
                population=pop, land_cover=lc, climate_zone=cz, biome=biome,
                path=f"tiles/{region}-{loc:04d}-{v}.mtil"))
        loc += 1
    return entries
