import os
import sys

required_dirs = [
    'pflow/solver/config',
    'pflow/solver/src/core',
    'pflow/solver/src/utils',
    'pflow/solver/tests',
    'scripts'
]

required_files = [
    'pflow/solver/config/defaults.yaml',
    'pflow/solver/src/cli.py',
    'pflow/solver/src/main.py',
    'pflow/solver/src/core/structure.py',
    'pflow/solver/src/core/mesh.py',
    'pflow/solver/src/core/fe.py',
    'pflow/solver/src/core/stepper.py',
    'pflow/solver/src/core/harness.py',
    'pflow/solver/src/utils/config.py',
    'pflow/solver/src/utils/logger.py',
    'pytest.ini',
    'requirements.txt'
]


def check_structure() -> bool:
    ok = True
    for dir_path in required_dirs:
        if not os.path.isdir(dir_path):
            print(f"Missing directory: {dir_path}")
            ok = False

    for file_path in required_files:
        if not os.path.isfile(file_path):
            print(f"Missing file: {file_path}")
            ok = False
    return ok


if __name__ == "__main__":
    sys.exit(0 if check_structure() else 1)
