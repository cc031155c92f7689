# app/campaigns/routes.py
import json
import math

from flask import Blueprint, jsonify, request

from app.routes import results_root
from Services.persist import MANIFEST_NAME, read_manifest, read_table

bp_campaigns = Blueprint("campaigns", __name__, url_prefix="/api/campaigns")


def _campaign_dir(name):
    root = results_root()
    directory = (root / name).resolve()
    if root not in directory.parents or not (directory / MANIFEST_NAME).is_file():
        return None
    return directory


def _clean(value):
    # NaN is not valid JSON
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


@bp_campaigns.get("")
def list_campaigns():
    root = results_root()
    if not root.is_dir():
        return jsonify(campaigns=[])
    items = []
    for path in sorted(root.rglob(MANIFEST_NAME)):
        try:
            manifest = read_manifest(path.parent)
        except (OSError, json.JSONDecodeError):
            continue
        items.append({
            "name": path.parent.relative_to(root).as_posix(),
            "kind": manifest.get("kind"),
            "status": manifest.get("status"),
            "config_hash": manifest.get("config_hash"),
            "started": manifest.get("started"),
            "finished": manifest.get("finished"),
        })
    kind = request.args.get("kind")
    if kind:
        items = [it for it in items if (it["kind"] or "").startswith(kind)]
    return jsonify(campaigns=items)


@bp_campaigns.get("/<path:name>/series/<file>")
def campaign_series(name, file):
    directory = _campaign_dir(name)
    if directory is None:
        return jsonify(error=f"campaign {name!r} not found"), 404
    if not file.endswith(".csv"):
        return jsonify(error="series must be a .csv artifact"), 400
    path = (directory / file).resolve()
    if directory not in path.parents or not path.is_file():
        return jsonify(error=f"{file} not found in {name}"), 404

    df = read_table(path)
    columns = request.args.get("columns")
    if columns:
        wanted = [c.strip() for c in columns.split(",") if c.strip()]
        missing = [c for c in wanted if c not in df.columns]
        if missing:
            return jsonify(error=f"unknown columns: {missing}"), 400
        df = df[wanted]
    records = [{k: _clean(v) for k, v in row.items()} for row in df.to_dict(orient="records")]
    return jsonify(columns=list(df.columns), rows=records)


@bp_campaigns.get("/<path:name>")
def campaign_detail(name):
    directory = _campaign_dir(name)
    if directory is None:
        return jsonify(error=f"campaign {name!r} not found"), 404
    manifest = read_manifest(directory)
    manifest["counters"] = {k: _clean(v) for k, v in manifest.get("counters", {}).items()}
    return jsonify(manifest)
