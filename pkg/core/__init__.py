# Core package: numerical modules for the turnpike experiments
