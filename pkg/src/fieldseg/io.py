"""On-disk formats.

Raster container: ``<stem>.bin`` holds the planar (band-major) little-endian
array, ``<stem>.json`` the sidecar::

    {"height": H, "width": W, "channels": C, "dtype": "float32" | "uint8" | "uint32",
     "pixel_size_m": 4.8, "origin_xy": [x0, y0], "band_names": [...]}

Polygons are GeoJSON FeatureCollections with one Polygon feature per field and
an integer ``id`` property.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import FieldPolygon, RasterGrid

RASTER_DTYPES = {"float32": "<f4", "uint8": "|u1", "uint32": "<u4"}


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def write_raster(path, raster: RasterGrid, dtype: str = "float32") -> Path:
    if dtype not in RASTER_DTYPES:
        raise ValueError(f"unsupported raster dtype {dtype!r}; choose from {sorted(RASTER_DTYPES)}")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    planar = np.ascontiguousarray(np.moveaxis(raster.data, 2, 0), dtype=RASTER_DTYPES[dtype])
    stem.with_suffix(".bin").write_bytes(planar.tobytes())
    meta = {
        "height": raster.height,
        "width": raster.width,
        "channels": raster.channels,
        "dtype": dtype,
        "pixel_size_m": float(raster.pixel_size),
        "origin_xy": [float(raster.origin[0]), float(raster.origin[1])],
        "band_names": list(raster.band_names),
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return stem.with_suffix(".bin")


def read_raster(path) -> RasterGrid:
    stem = _stem(path)
    meta = json.loads(stem.with_suffix(".json").read_text())
    h, w, c = meta["height"], meta["width"], meta["channels"]
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=RASTER_DTYPES[meta["dtype"]])
    if raw.size != h * w * c:
        raise ValueError(f"{stem}.bin holds {raw.size} values, sidecar expects {h * w * c}")
    data = np.moveaxis(raw.reshape(c, h, w), 0, 2).copy()
    return RasterGrid(data, meta["pixel_size_m"], tuple(meta["origin_xy"]), meta["band_names"])


def polygons_to_geojson(polys, crs_tag: str | None = None) -> dict:
    features = []
    for p in polys:
        rings = [p.ring, *p.holes]
        coords = [np.vstack([r, r[:1]]).tolist() for r in rings]
        features.append({
            "type": "Feature",
            "properties": {"id": int(p.id), "crs_tag": p.crs_tag},
            "geometry": {"type": "Polygon", "coordinates": coords},
        })
    fc = {"type": "FeatureCollection", "features": features}
    if crs_tag is not None:
        fc["crs_tag"] = crs_tag
    return fc


def polygons_from_geojson(fc: dict) -> list[FieldPolygon]:
    out = []
    for feat in fc.get("features", []):
        geom = feat["geometry"]
        if geom["type"] != "Polygon":
            raise ValueError(f"only Polygon features are supported, got {geom['type']}")
        props = feat.get("properties") or {}
        rings = geom["coordinates"]
        out.append(FieldPolygon(int(props["id"]), np.asarray(rings[0]), props.get("crs_tag", "local"),
                                tuple(np.asarray(h) for h in rings[1:])))
    return out


def write_geojson(path, polys, crs_tag: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(polygons_to_geojson(polys, crs_tag)))


def read_geojson(path) -> list[FieldPolygon]:
    return polygons_from_geojson(json.loads(Path(path).read_text()))


def dump_json(path, obj) -> None:
    """Deterministic JSON (sorted keys, fixed float repr) for reproducible reports."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")
