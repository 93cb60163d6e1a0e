"""Packaged scenario files"""
