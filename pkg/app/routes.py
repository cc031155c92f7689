# app/routes.py
import pathlib

from flask import Blueprint, current_app, jsonify, send_from_directory

from Services.persist import CODE_VERSION

bp = Blueprint("main", __name__, url_prefix="/api")


def results_root() -> pathlib.Path:
    return pathlib.Path(current_app.config["RESULTS_DIR"]).resolve()


@bp.get("/health")
def health():
    root = results_root()
    return jsonify(status="ok", version=CODE_VERSION, results_dir=str(root), results_present=root.is_dir())


# Serve any campaign artifact (snapshots, CSVs, manifests)
@bp.get("/files/<path:relpath>")
def get_file(relpath):
    root = results_root()
    fp = (root / relpath).resolve()
    if root not in fp.parents or not fp.is_file():
        return jsonify(error="not found"), 404
    return send_from_directory(root, relpath, as_attachment=True)
