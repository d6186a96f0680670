"""
Low-RAMP toolkit
Low-rank matrix estimation by approximate message passing, state evolution and phase diagrams
"""
import logging
from logging.handlers import RotatingFileHandler
import os

logger = logging.getLogger('lowramp')

class LowRampContext:
    """Active configuration plus the package logger"""
    
    def __init__(self, config_class, config_name):
        self.config = config_class
        self.config_name = config_name
        self.logger = logger
    
    @property
    def testing(self):
        return bool(getattr(self.config, 'TESTING', False))

_current_context = None

def create_context(config_name='default'):
    """Context factory: loads configuration and sets up logging"""
    global _current_context
    
    # Load configuration
    from config import config
    if config_name not in config:
        from lowramp.validation import ConfigError
        raise ConfigError(f"Unknown configuration profile: {config_name}")
    context = LowRampContext(config[config_name], config_name)
    
    logger.setLevel(getattr(logging, str(context.config.LOG_LEVEL).upper(), logging.INFO))
    
    # Configure logging
    if context.config.LOG_TO_FILE and not context.testing:
        log_dir = context.config.LOG_DIR
        if not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)
        
        log_path = os.path.join(log_dir, 'lowramp.log')
        if not any(isinstance(h, RotatingFileHandler) and h.baseFilename == os.path.abspath(log_path)
                   for h in logger.handlers):
            file_handler = RotatingFileHandler(
                log_path,
                maxBytes=10240000,  # 10MB
                backupCount=10
            )
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
            ))
            file_handler.setLevel(logging.INFO)
            logger.addHandler(file_handler)
        logger.info('Low-RAMP toolkit startup')
    
    _current_context = context
    return context

def current_config():
    """Configuration of the active context (default profile when none was created)"""
    if _current_context is not None:
        return _current_context.config
    from config import config
    return config['default']
