#!/usr/bin/env python3
"""
Text-Guided JPEG Artifacts Reduction
Flask application serving degrade/deblock/info over JSON
"""

import logging
import os
import time
import uuid
from typing import Optional

from dotenv import load_dotenv
from flask import Flask, jsonify, render_template, request
from flask_cors import CORS
from werkzeug.exceptions import BadRequest, HTTPException, RequestEntityTooLarge

# Load environment variables
load_dotenv()

from config.settings import config
from core.deblocker import DeblockingModel
from core.exceptions import DomainError, ShapeError
from utils.image_codec import decode_image_payload, encode_gray_png, encode_png
from utils.logger import setup_logger
from utils.monitoring import observe_inference, setup_monitoring

WEB_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'web')


def _json_body() -> dict:
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise BadRequest('Request body must be a JSON object')
    return data


def _required_image(data: dict, key: str = 'image'):
    if key not in data:
        raise BadRequest(f"'{key}' is required")
    return decode_image_payload(data[key])


def _optional_qf(data: dict) -> Optional[int]:
    qf = data.get('qf')
    if qf is None:
        return None
    if isinstance(qf, bool) or not isinstance(qf, (int, str)):
        raise BadRequest("'qf' must be an integer")
    try:
        return int(qf)
    except ValueError:
        raise BadRequest("'qf' must be an integer")


def create_app(config_name: Optional[str] = None, checkpoint_path: Optional[str] = None,
               model: Optional[DeblockingModel] = None) -> Flask:
    """Build the Flask app around one immutable deblocking model"""
    app_config = config[config_name or os.environ.get('FLASK_ENV', 'default')]
    app = Flask(__name__, template_folder=os.path.join(WEB_DIR, 'templates'),
                static_folder=os.path.join(WEB_DIR, 'static'))
    app.config.from_object(app_config)
    app_config.init_app(app)

    CORS(app, origins=app_config.CORS_ORIGINS)
    setup_logger(app_config.LOG_LEVEL, app_config.LOG_FILE)

    model = model or DeblockingModel(checkpoint_path or app_config.CHECKPOINT_PATH)
    app.extensions['deblocking_model'] = model
    if app_config.ENABLE_METRICS:
        setup_monitoring(app, model)

    @app.route('/')
    def index():
        """Controllable deblocking interface"""
        return render_template('index.html')

    @app.route('/api/health', methods=['GET'])
    def health_check():
        return jsonify({'status': 'healthy', 'services': {'deblocking_model': model.is_healthy()}})

    @app.route('/api/info', methods=['GET'])
    def info():
        """Model config, vocabulary size and checkpoint hash"""
        return jsonify(model.info())

    @app.route('/api/degrade', methods=['POST'])
    def degrade_image():
        data = _json_body()
        image = _required_image(data)
        qf = _optional_qf(data)
        if qf is None:
            raise BadRequest("'qf' is required")

        start = time.perf_counter()
        compressed = model.degrade(image, qf)
        observe_inference('degrade', time.perf_counter() - start)
        return jsonify({
            'compressed': encode_png(compressed),
            'qf': qf,
            'width': int(compressed.shape[2]),
            'height': int(compressed.shape[1])
        })

    @app.route('/api/deblock', methods=['POST'])
    def deblock_image():
        """Deblock an image under a caption; ?attention=1 adds per-word maps"""
        data = _json_body()
        image = _required_image(data)
        caption = data.get('caption')
        if not isinstance(caption, str) or not caption.strip():
            raise DomainError('Caption must be a non-empty string')
        qf = _optional_qf(data)
        reference = _required_image(data, 'reference') if data.get('reference') else None
        checkpoint_id = data.get('checkpoint_id')
        if checkpoint_id and not model.checkpoint_hash.startswith(str(checkpoint_id)):
            raise DomainError(f"Unknown checkpoint_id {checkpoint_id!r}")
        with_attention = request.args.get('attention', '0').lower() in ('1', 'true', 'yes')

        start = time.perf_counter()
        result = model.deblock(image, caption, qf=qf, reference=reference, with_attention=with_attention)
        observe_inference('deblock', time.perf_counter() - start)

        response = {
            'deblocked': encode_png(result.deblocked),
            'compressed': encode_png(result.compressed),
            'caption': caption,
            'checkpoint_hash': model.checkpoint_hash
        }
        if result.metrics is not None:
            response['metrics'] = result.metrics
        if with_attention:
            response['attention'] = [{'word': item['word'], 'png': encode_gray_png(item['map'])}
                                     for item in result.attention]
        return jsonify(response)

    @app.errorhandler(RequestEntityTooLarge)
    def too_large(e):
        return jsonify({'error': 'Request exceeds the 16 MB limit'}), 413

    @app.errorhandler(BadRequest)
    def bad_request(e):
        return jsonify({'error': e.description or 'Malformed request'}), 400

    @app.errorhandler(DomainError)
    @app.errorhandler(ShapeError)
    def unprocessable(e):
        return jsonify({'error': str(e)}), 422

    @app.errorhandler(Exception)
    def internal_error(e):
        if isinstance(e, HTTPException):
            return jsonify({'error': e.description}), e.code
        error_id = uuid.uuid4().hex
        logging.error(f"Unhandled error {error_id} on {request.path}: {str(e)}", exc_info=e)
        return jsonify({'error': 'Internal server error', 'error_id': error_id}), 500

    logging.info("Deblocking service initialized successfully")
    return app


if __name__ == '__main__':
    app_config = config['default']
    app = create_app()
    logging.info(f"Starting deblocking service on port {app_config.PORT}")
    app.run(host=app_config.HOST, port=app_config.PORT, debug=app_config.DEBUG)
