"""
PDE Workbench Results API
A read-only Flask server over the output directory: evaluation reports and
sweep ledgers.
"""

import os
from pathlib import Path

from flask import Flask, jsonify
from flask_cors import CORS
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

from ledger import LedgerManager
from metrics import read_report_rows, reports_dir

REPORT_SUFFIXES = ('.csv', '.json')


def create_app(output_dir: str = None) -> Flask:
    """
    Build the results API.

    Args:
        output_dir: Workbench output directory (default: PDEWB_OUTPUT_DIR or ./runs)

    Returns:
        Configured Flask application
    """
    app = Flask(__name__)

    cors_origin = os.environ.get('CORS_ORIGIN', '*')
    CORS(app, origins=cors_origin)

    app.config['OUTPUT_DIR'] = output_dir or os.environ.get('PDEWB_OUTPUT_DIR', './runs')
    app.config['REPORTS_DIR'] = str(reports_dir(app.config['OUTPUT_DIR']))

    ledger_manager = LedgerManager(os.path.join(app.config['OUTPUT_DIR'], 'sweeps'))

    def report_files():
        directory = Path(app.config['REPORTS_DIR'])
        if not directory.exists():
            return []
        return sorted(p for p in directory.iterdir() if p.suffix in REPORT_SUFFIXES)

    @app.route('/')
    def index():
        """Health check endpoint"""
        return {
            'status': 'running',
            'service': 'PDE Workbench Results',
            'output_dir': app.config['OUTPUT_DIR'],
            'reports': len(report_files()),
            'sweeps': len(ledger_manager.list_sweeps()),
        }

    @app.route('/reports')
    def list_reports():
        """
        List report files.

        Returns:
            JSON array of {name, format, size}
        """
        try:
            return jsonify([
                {'name': p.name, 'format': p.suffix.lstrip('.'), 'size': p.stat().st_size}
                for p in report_files()
            ])
        except Exception as e:
            return jsonify({'error': str(e)}), 500

    @app.route('/reports/<name>')
    def get_report(name):
        """
        Rows of one report.

        Args:
            name: Report file name

        Returns:
            JSON array of rows
        """
        try:
            matches = [p for p in report_files() if p.name == name]
            if not matches:
                return jsonify({'error': 'Report not found'}), 404
            return jsonify(read_report_rows(matches[0]))
        except Exception as e:
            return jsonify({'error': str(e)}), 500

    @app.route('/sweeps')
    def list_sweeps():
        """Sweep names with their ledger summaries."""
        try:
            return jsonify([
                {'name': name, **ledger_manager.ledger(name).summary()}
                for name in ledger_manager.list_sweeps()
            ])
        except Exception as e:
            return jsonify({'error': str(e)}), 500

    @app.route('/sweeps/<name>')
    def get_sweep(name):
        """
        Ledger summary and rows of one sweep.

        Args:
            name: Sweep name
        """
        try:
            if name not in ledger_manager.list_sweeps():
                return jsonify({'error': 'Sweep not found'}), 404
            ledger = ledger_manager.ledger(name)
            return jsonify({
                'name': name,
                'summary': ledger.summary(),
                'cells': ledger.load(),
            })
        except Exception as e:
            return jsonify({'error': str(e)}), 500

    return app


app = create_app()


if __name__ == '__main__':
    port = int(os.environ.get('PORT', 5000))
    debug = os.environ.get('FLASK_DEBUG', 'False').lower() == 'true'
    app.run(host='0.0.0.0', port=port, debug=debug)
