from __future__ import annotations

from flask import Blueprint, Flask, current_app, jsonify, request

from pixmot.scorers import ReferenceScorer, Scorer, ScoreRequest

scorer_blueprint = Blueprint("scorer", __name__)


@scorer_blueprint.route("/scorer/health", methods=["GET"])
def health():
    scorer = current_app.config["PIXMOT_SCORER"]
    return jsonify({"status": "ok", "scorer": type(scorer).__name__})


@scorer_blueprint.route("/scorer/score", methods=["POST"])
def score():
    payload = request.get_json(silent=True)
    try:
        req = ScoreRequest.from_json(payload)
    except ValueError as exc:
        return jsonify({"error": str(exc)}), 400
    response = current_app.config["PIXMOT_SCORER"].score(req)
    current_app.logger.debug("scored %s kind=%s -> %s", req.image_path, req.kind, response)
    return jsonify(response.to_json())


def create_app(scorer: Scorer | None = None) -> Flask:
    app = Flask(__name__)
    app.config["PIXMOT_SCORER"] = scorer or ReferenceScorer()
    app.register_blueprint(scorer_blueprint)
    return app
