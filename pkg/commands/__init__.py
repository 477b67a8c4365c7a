"""
Subcommands of the lab command line.
Each module registers one command object through its setup(cli) function.
"""
