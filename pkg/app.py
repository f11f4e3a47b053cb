import logging
import os
import sys
import traceback

import numpy as np
from flask import Flask, jsonify, request

from db.client import get_artifacts_root, get_log_level, get_mnist_dir
from db.queries import ArtifactStore
from logic.errors import ShapeMismatchError
from logic.orchestrator import run_inference, topology_from_config
from logic.seeding import derive_rng
from logic.sharing import TRUSTED, PartySet, SEMI_HONEST, SharingEngine

logger = logging.getLogger(__name__)

app = Flask(__name__)
app.config["ARTIFACTS_DIR"] = None  # None -> HYFL_ARTIFACTS_DIR / "artifacts"


def get_store() -> ArtifactStore:
    return ArtifactStore(app.config.get("ARTIFACTS_DIR"))


@app.route('/health')
def health():
    store = get_store()
    return jsonify({
        "status": "online",
        "python": sys.version,
        "artifacts_root": str(store.root),
        "artifacts_root_exists": store.root.exists(),
        "environment": {
            "HYFL_ARTIFACTS_DIR": "set" if os.environ.get("HYFL_ARTIFACTS_DIR") else "default",
            "HYFL_MNIST_DIR": "set" if get_mnist_dir() else "missing",
        },
    })


@app.route('/api/runs')
def list_runs():
    return jsonify({"runs": get_store().list_runs()})


@app.route('/api/runs/<path:run>/metrics')
def run_metrics(run):
    df = get_store().read_metrics(run)
    return jsonify({"run": run, "rows": df.to_dict(orient="records")})


@app.route('/api/runs/<path:run>/report')
def run_report(run):
    return jsonify(get_store().read_report(run))


@app.route('/api/runs/<path:run>/inference', methods=['POST'])
def run_private_inference(run):
    """Labels for the posted samples; the query is shared to the chosen cluster committee."""
    data = request.get_json(silent=True) or {}
    samples = data.get("samples")
    if samples is None:
        return jsonify(error="body must contain 'samples'"), 400
    cluster = int(data.get("cluster", 0))

    store = get_store()
    cfg = store.read_config(run)
    model, arch = store.load_model_shares(run)
    topology = topology_from_config(cfg)
    if not 0 <= cluster < topology.num_clusters:
        return jsonify(error=f"cluster {cluster} not in [0, {topology.num_clusters})"), 400
    committee = topology.cluster_committees[cluster]

    engine = SharingEngine(frac_bits=model.frac_bits)
    size = len(model.shares)
    engine.register(PartySet(model.owner, size, TRUSTED if size == 1 else SEMI_HONEST))
    engine.register(committee)
    rng = derive_rng(cfg.seed, "inference", cluster)
    try:
        local = engine.reshare(model, model.owner, committee, rng)
        queries = np.asarray(samples, dtype=np.float64)
        if queries.ndim < 2 and queries.size:
            raise ShapeMismatchError("'samples' must be a list of samples")
        labels = run_inference(engine, local, queries, "client:http", rng, arch)
    finally:
        engine.close()
    logger.info("inference on run %s cluster %s: %d samples", run, committee.id, len(labels))
    return jsonify({"labels": labels.tolist(), "cluster": committee.id,
                    "cost": engine.meter.snapshot().as_dict()})


@app.errorhandler(Exception)
def handle_exception(e):
    if hasattr(e, 'code') and isinstance(e.code, int) and e.code < 500:
        return jsonify(error=str(e)), e.code
    if isinstance(e, FileNotFoundError):
        return jsonify(error=str(e)), 404
    if isinstance(e, ValueError):
        return jsonify(error=str(e), type=type(e).__name__), 400

    tb = traceback.format_exc()
    logger.error("unhandled error: %s", e, exc_info=True)
    return jsonify({
        "error": str(e),
        "traceback": tb.split('\n')
    }), 500


if __name__ == '__main__':
    logging.basicConfig(level=get_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.info("serving artifacts from %s", get_artifacts_root())
    app.run(host="127.0.0.1", debug=False)
