import os
from typing import Iterable, Optional

from src.recommender.exceptions import ValidationError


def validate_input_file(path: Optional[str], what: str = "Input file") -> None:
    """Validate that an input path exists and is a regular file."""
    if not path:
        raise ValidationError("missing-path", f"{what} path is required")
    if not os.path.isfile(path):
        raise ValidationError("missing-path", f"{what} not found: {path}")


def validate_output_directory(path: str) -> None:
    """Validate output directory path."""
    if not path:
        raise ValidationError("missing-path", "Output directory path is required")

    try:
        # Create directory if it doesn't exist
        os.makedirs(path, exist_ok=True)

        # Check if directory is writable
        test_file = os.path.join(path, '.test')
        try:
            with open(test_file, 'w') as f:
                f.write('test')
            os.remove(test_file)
        except (IOError, OSError) as e:
            raise ValidationError("unwritable-path", f"Output directory is not writable: {str(e)}")

    except ValidationError:
        raise
    except Exception as e:
        raise ValidationError("unwritable-path", f"Invalid output directory: {str(e)}")


def validate_file_path(path: str) -> None:
    """Validate file path for writing."""
    if not path:
        raise ValidationError("missing-path", "File path is required")

    try:
        # Create directory if it doesn't exist
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        # Check if path is writable
        try:
            with open(path, 'a'):
                pass
        except (IOError, OSError) as e:
            raise ValidationError("unwritable-path", f"File path is not writable: {str(e)}")

    except ValidationError:
        raise
    except Exception as e:
        raise ValidationError("unwritable-path", f"Invalid file path: {str(e)}")


def validate_k_values(values: Iterable[int]) -> None:
    """Validate a retrieval-size sweep."""
    values = list(values)
    if not values:
        raise ValidationError("bad-sweep", "At least one K value is required")
    if any(not isinstance(k, int) or k < 0 for k in values):
        raise ValidationError("bad-sweep", "K values must be integers greater than or equal to 0")


def validate_intensities(values: Iterable[float]) -> None:
    """Validate a shift-intensity sweep."""
    values = list(values)
    if not values:
        raise ValidationError("bad-sweep", "At least one shift intensity is required")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValidationError("bad-sweep", "Shift intensities must be in [0, 1]")


def validate_seed_count(count: int) -> None:
    """Validate the number of seeds of a repeated run."""
    if not isinstance(count, int):
        raise ValidationError("bad-seeds", "Seed count must be an integer")
    if count < 1:
        raise ValidationError("bad-seeds", "Seed count must be at least 1")
    if count > 100:
        raise ValidationError("bad-seeds", "Seed count cannot exceed 100")
