"""
Shared monitoring functionality for pipeline stages
"""

import logging
import time
from datetime import datetime
from functools import wraps
from typing import Callable, Optional

logger = logging.getLogger(__name__)

# Global callback for monitoring
_stage_callback: Optional[Callable[[str, dict], None]] = None


def set_stage_callback(callback: Optional[Callable[[str, dict], None]]):
    """Set the callback function for stage monitoring."""
    global _stage_callback
    _stage_callback = callback


def _summarize(result) -> dict:
    if hasattr(result, 'model_dump'):
        try:
            return {'type': type(result).__name__, 'fields': sorted(result.model_dump().keys())}
        except Exception:
            return {'type': type(result).__name__}
    if isinstance(result, dict):
        return {'keys': sorted(str(k) for k in result)[:20]}
    if isinstance(result, (list, tuple)):
        return {'count': len(result)}
    return {'value': str(result)[:200]}


def monitor_stage(stage_name: str, section: str):
    """Decorator to monitor a pipeline stage (generation, training, evaluation...)."""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            logger.debug("%s/%s started", section, stage_name)

            if _stage_callback:
                _stage_callback('stage_start', {
                    'stage': stage_name,
                    'section': section,
                    'parameters': {
                        'args': [str(arg)[:100] for arg in args],
                        'kwargs': {k: str(v)[:100] for k, v in kwargs.items()}
                    },
                    'timestamp': datetime.now().isoformat()
                })

            try:
                result = func(*args, **kwargs)
            except Exception as e:
                duration = time.perf_counter() - start_time
                logger.debug("%s/%s failed after %.3fs: %s", section, stage_name, duration, e)
                if _stage_callback:
                    _stage_callback('stage_error', {
                        'stage': stage_name,
                        'section': section,
                        'duration': duration,
                        'error': str(e),
                        'success': False,
                        'timestamp': datetime.now().isoformat()
                    })
                raise

            duration = time.perf_counter() - start_time
            logger.info("%s/%s finished in %.3fs", section, stage_name, duration)
            if _stage_callback:
                _stage_callback('stage_complete', {
                    'stage': stage_name,
                    'section': section,
                    'duration': duration,
                    'result': _summarize(result),
                    'success': True,
                    'timestamp': datetime.now().isoformat()
                })
            return result

        return wrapper
    return decorator
