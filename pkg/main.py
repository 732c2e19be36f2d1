import sys

from dotenv import load_dotenv

from src.recommender.cli import dispatch


def main() -> int:
    """Main entry point for the recommender command line."""
    # Load environment variables (CIRR_CONFIG, CIRR_LOG_LEVEL)
    load_dotenv()
    return dispatch(sys.argv[1:])


if __name__ == '__main__':
    sys.exit(main())
