#!/usr/bin/env python3
"""
Test management script for the EOQ allocation toolkit
Usage: python test.py [command]

Commands:
  run        - Run all tests (default)
  unit       - Run unit tests only
  functional - Run the published-example reproductions only
  properties - Run the randomized property suites only
  fixtures   - Verify the bundled fixture checksums
"""

import os
import subprocess
import sys

COMMANDS = {
    "run": ("Running all tests...", "python tests/run_tests.py"),
    "unit": ("Running unit tests only...", "python tests/run_tests.py unit"),
    "functional": ("Running functional tests only...", "python -m unittest tests.test_functional -v"),
    "properties": ("Running property suites only...", "python -m unittest tests.test_properties -v"),
    "fixtures": ("Verifying fixture checksums...", "python eoq_cli.py fixtures"),
}


def run_command(cmd):
    """Run a command and return success status"""
    try:
        result = subprocess.run(cmd, shell=True, cwd=os.path.dirname(os.path.abspath(__file__)))
        return result.returncode == 0
    except Exception as e:
        print(f"Error running command: {e}")
        return False


def main():
    """Main test management function"""

    # Get command from arguments
    command = sys.argv[1] if len(sys.argv) > 1 else "run"

    print("EOQ Allocation Toolkit - Test Management")
    print(f"Command: {command}")
    print("=" * 50)

    if command in ("help", "--help", "-h"):
        print(__doc__)
        return 0
    if command not in COMMANDS:
        print(f"Unknown command: {command}")
        print("Use 'python test.py help' for available commands")
        return 1

    message, cmd = COMMANDS[command]
    print(message)
    success = run_command(cmd)

    print("\n" + "=" * 50)
    if success:
        print(f"✓ {command.title()} completed successfully")
        return 0
    print(f"✗ {command.title()} failed")
    return 1


if __name__ == "__main__":
    sys.exit(main())
