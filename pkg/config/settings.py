"""
Configuration settings for the text-guided deblocking service and trainer
"""

import os


class Config:
    """Base configuration class"""

    # Flask Configuration
    SECRET_KEY = os.environ.get('SECRET_KEY', 'dev-secret-key-change-in-production')
    DEBUG = os.environ.get('FLASK_DEBUG', 'False').lower() == 'true'
    HOST = os.environ.get('HOST', '0.0.0.0')
    PORT = int(os.environ.get('TGJAR_PORT', '5000'))

    # Model Configuration
    CHECKPOINT_PATH = os.environ.get('TGJAR_CHECKPOINT', 'checkpoints/tgjar.ckpt.json')
    DEFAULT_QF = int(os.environ.get('DEFAULT_QF', '5'))
    DEFAULT_SUBSAMPLING = os.environ.get('DEFAULT_SUBSAMPLING', '420')
    PERCEPTUAL_SEED = int(os.environ.get('PERCEPTUAL_SEED', '1234'))
    PERCEPTUAL_WEIGHTS = os.environ.get('PERCEPTUAL_WEIGHTS', '')
    TORCH_NUM_THREADS = int(os.environ.get('TORCH_NUM_THREADS', '1'))

    # Logging Configuration
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FILE = os.environ.get('LOG_FILE', 'logs/tgjar.log')
    TRAIN_LOG_DIR = os.environ.get('TRAIN_LOG_DIR', 'logs/train')

    # Monitoring Configuration
    ENABLE_METRICS = os.environ.get('ENABLE_METRICS', 'True').lower() == 'true'

    # Upload Configuration
    MAX_CONTENT_LENGTH = 16 * 1024 * 1024  # 16MB max request size

    # CORS Configuration
    CORS_ORIGINS = os.environ.get('CORS_ORIGINS', '*').split(',')

    @staticmethod
    def init_app(app):
        """Initialize application with configuration"""
        os.makedirs(os.path.dirname(Config.LOG_FILE) or '.', exist_ok=True)


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True
    LOG_LEVEL = 'DEBUG'


class TestingConfig(Config):
    """Testing configuration"""
    TESTING = True
    ENABLE_METRICS = False
    LOG_FILE = 'logs/tgjar_test.log'


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False
    LOG_LEVEL = 'WARNING'

    @classmethod
    def init_app(cls, app):
        Config.init_app(app)
        app.logger.info('TGJAR deblocking service startup')


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}
