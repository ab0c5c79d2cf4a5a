import sys
from pathlib import Path

from dotenv import load_dotenv

# Adding the project root to the Python path so `deskedit.app...` imports resolve
# when this file is run directly.
sys.path.append(str(Path(__file__).resolve().parent.parent))

# Load environment variables
load_dotenv()

from deskedit.app.cli.app import cli  # noqa: E402


def main():
    cli(prog_name="deskedit")


if __name__ == "__main__":
    main()
