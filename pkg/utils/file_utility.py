import logging
import os

from utils.errors import PipelineError

logger = logging.getLogger(__name__)


class FileUtility:
    @staticmethod
    def check_file_generation(file_path):
        if file_path and os.path.exists(file_path):
            logger.info(f"Artifact written: {file_path}")
            return True
        else:
            logger.error(f"Expected artifact not found: {file_path}")
            return False

    @staticmethod
    def ensure_directory_exists(directory_path):
        """
        Creates the directory (and parents) if it does not exist.
        """
        if directory_path and not os.path.exists(directory_path):
            os.makedirs(directory_path, exist_ok=True)
            logger.debug(f"Created directory: {directory_path}")

    @staticmethod
    def require_file(file_path, stage):
        """Path of an input a stage depends on; raises when a predecessor stage has not produced it."""
        if not os.path.exists(file_path):
            raise PipelineError(stage, f"missing input {file_path}; run the previous stage first")
        return file_path
