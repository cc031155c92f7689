from flask import Flask
from flask_cors import CORS

from app import settings
from .routes import bp as main_bp
from .campaigns.routes import bp_campaigns


def create_app(results_dir=None):
    app = Flask(__name__)
    app.config.from_mapping(RESULTS_DIR=str(results_dir or settings.RESULTS_DIR))

    CORS(app, resources={r"/api/*": {"origins": "*"}})

    app.register_blueprint(main_bp)
    app.register_blueprint(bp_campaigns)
    return app
