"""Krasovskii and shifted passivity analysis, passivity-based dynamic
controllers, and closed-loop simulation of the averaged DC-Zeta converter."""
