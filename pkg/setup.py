#!/usr/bin/env python3
"""
Setup script for the Mining Complex Hyper-Heuristic

This script helps with initial setup and configuration.
"""

import shutil
import subprocess
import sys
from pathlib import Path


def check_python_version():
    """Check if Python version is compatible"""
    if sys.version_info < (3, 9):
        print("❌ Python 3.9 or higher is required")
        print(f"Current version: {sys.version}")
        return False
    print(f"✅ Python version: {sys.version.split()[0]}")
    return True


def install_dependencies():
    """Install required dependencies"""
    print("📦 Installing dependencies...")
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        print("✅ Dependencies installed successfully")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Failed to install dependencies: {e}")
        return False


def setup_environment():
    """Setup environment configuration"""
    print("⚙️  Setting up environment configuration...")

    env_file = Path(".env")
    env_example = Path("env.example")

    if env_file.exists():
        print("✅ .env file already exists")
        return True

    if not env_example.exists():
        print("❌ env.example file not found")
        return False

    shutil.copy(env_example, env_file)
    print("✅ Created .env file from template")

    print("\n📝 Optional settings in .env:")
    print("   - MCHH_WORKERS: concurrent experiment cells")
    print("   - MCHH_OUT_DIR: default output directory")
    print("   - MCHH_LOG_LEVEL: DEBUG, INFO, WARNING ...")
    return True


def smoke_test():
    """Generate a tiny instance and brute-force its optimum"""
    print("\n🔗 Running a smoke test...")
    try:
        result = subprocess.run(
            [sys.executable, "cli.py", "oracle", "--config", "oracle.example.json"],
            capture_output=True, text=True, timeout=300,
        )
        if result.returncode == 0:
            print("✅ Smoke test successful!")
            return True
        print("❌ Smoke test failed:")
        print(result.stdout)
        print(result.stderr)
        return False
    except subprocess.TimeoutExpired:
        print("❌ Smoke test timed out")
        return False
    except Exception as e:
        print(f"❌ Error running smoke test: {e}")
        return False


def main():
    """Main setup function"""
    print("🚀 Mining Complex Hyper-Heuristic Setup")
    print("=" * 50)

    if not check_python_version():
        sys.exit(1)

    if not install_dependencies():
        sys.exit(1)

    if not setup_environment():
        sys.exit(1)

    print("\n" + "=" * 50)
    print("🎉 Setup completed successfully!")
    print("\nNext steps:")
    print("1. Generate an instance: python cli.py generate --seed 7 --out results/instance.json")
    print("2. Run an experiment: python cli.py run --config experiment.example.json")
    print("3. Rebuild the report: python cli.py report --config experiment.example.json")
    print("4. Run example: python example_usage.py")
    print("5. Run tests: pytest")

    try:
        test_now = input("\nWould you like to run the smoke test now? (y/n): ").lower().strip()
        if test_now in ['y', 'yes']:
            smoke_test()
    except KeyboardInterrupt:
        print("\nSetup completed. You can run the smoke test later.")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        # Invoked by a build backend (pip install); metadata lives in pyproject.toml
        from setuptools import setup
        setup()
    else:
        main()
