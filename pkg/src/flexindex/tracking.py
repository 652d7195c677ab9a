import json
import os

from dvclive import Live

from flexindex.logger import get_logger

logger = get_logger('tracking')

METRIC_KEYS = ('delta_guaranteed', 'delta_optimistic', 'gap', 'lower_iterations', 'upper_iterations', 'wall_s')


def save_report(report: dict, file_path: str) -> None:
    """Save a run report to a JSON file."""
    try:
        directory = os.path.dirname(file_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(file_path, 'w') as file:
            json.dump(report, file, indent=4)
        logger.debug('Report saved to %s', file_path)
    except Exception as e:
        logger.error('Error occurred while saving the report: %s', e)
        raise


def log_run(result: dict, params: dict, save_dvc_exp: bool = True) -> bool:
    """
    Log bounds, iteration counts and wall time of a run to dvclive.

    Tracking never fails a run: errors are logged and False is returned.
    """
    try:
        with Live(save_dvc_exp=save_dvc_exp) as live:
            for key in METRIC_KEYS:
                if result.get(key) is not None:
                    live.log_metric(key, float(result[key]))
            live.log_params(params)
        logger.debug('Run tracked with dvclive')
        return True
    except Exception as e:
        logger.warning('Experiment tracking failed: %s', e)
        return False
