const os = require("os");

const NAMES = { 200: "OK", 201: "Created", 204: "No Content", 301: "Moved Permanently", 404: "Not Found", 500: "Internal Server Error" };

function statusName(code) {
  return NAMES[code] || "Unknown";
}

function describe(code) {
  return code + " " + statusName(code) + os.EOL;
}

module.exports = { statusName, describe };
