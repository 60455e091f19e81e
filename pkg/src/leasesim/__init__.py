"""Lease-based intersection coordination."""
