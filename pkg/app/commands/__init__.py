"""Subcommand handlers; each module registers one subcommand with the router."""
