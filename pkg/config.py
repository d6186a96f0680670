"""
Configuration settings for the Low-RAMP toolkit
Numerical defaults and environment-specific settings
"""
import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    """Base configuration class with numerical defaults"""
    
    TESTING = False
    
    # Low-RAMP solver
    DAMPING = float(os.environ.get('LOWRAMP_DAMPING', '0.5'))
    TOLERANCE = float(os.environ.get('LOWRAMP_TOL', '1e-8'))
    MAX_ITERS = int(os.environ.get('LOWRAMP_MAX_ITERS', '1000'))
    INIT_SCALE = float(os.environ.get('LOWRAMP_INIT_SCALE', '1e-3'))
    SELF_AVERAGED_MIN_N = 500  # default variant switches to self_averaged from here
    
    # Integration
    GH_NODES = int(os.environ.get('LOWRAMP_GH_NODES', '201'))
    MC_SAMPLES = int(os.environ.get('LOWRAMP_MC_SAMPLES', '200000'))
    MC_SEED = int(os.environ.get('LOWRAMP_MC_SEED', '12345'))
    INTEGRATION_TOL = 1e-10
    
    # State evolution
    SE_DAMPING = 0.5
    SE_TOL = float(os.environ.get('LOWRAMP_SE_TOL', '1e-12'))
    SE_MAX_ITERS = int(os.environ.get('LOWRAMP_SE_MAX_ITERS', '100000'))
    SE_UNINFORMATIVE_INIT = 1e-6
    
    # Threshold finder
    X_GRID_MIN = 1e-6
    X_GRID_MAX = float(os.environ.get('LOWRAMP_X_MAX', '1e4'))
    X_GRID_POINTS = int(os.environ.get('LOWRAMP_X_POINTS', '2000'))
    
    # Workers
    THREADS = int(os.environ.get('LOWRAMP_THREADS', '1'))
    
    # Logging
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_DIR = os.environ.get('LOG_DIR', 'logs')
    LOG_TO_FILE = True
    
    # Output
    FLOAT_FORMAT = '.12g'
    INSTANCE_DIR = os.environ.get('LOWRAMP_INSTANCE_DIR', 'instances')

class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'DEBUG')

class ProductionConfig(Config):
    """Production configuration for long sweeps"""
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')

class TestingConfig(Config):
    """Testing configuration"""
    TESTING = True
    LOG_TO_FILE = False
    X_GRID_POINTS = 1200

# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}
